use std::path::{Path, PathBuf};
use std::sync::Arc;

use driftflow::config::{write_config, CostSpec, KernelSpec, PopulationSpec, ScenarioConfig};
use driftflow::diagnostics::wasserstein2_1d;
use driftflow::dynamics::Regime;
use driftflow::fv::{self, Direction};
use driftflow::grid::{Axis, Density, Grid};
use proptest::prelude::*;

fn line(lo: f64, hi: f64, n: usize) -> Arc<Grid> {
    Arc::new(Grid::line(lo, hi, n).unwrap())
}

fn gaussian_spec(mean: f64, variance: f64) -> PopulationSpec {
    PopulationSpec::Gaussian { mean: vec![mean], variance: vec![variance] }
}

fn regime_strategy() -> impl Strategy<Value = Regime> {
    prop_oneof![
        Just(Regime::Aligned),
        (0.01f64..100.0).prop_map(|r| Regime::CompetitiveCoupled { timescale_ratio: r }),
        Just(Regime::CompetitiveFastX),
        Just(Regime::CompetitiveFastRho),
        (-5.0f64..5.0).prop_map(|x| Regime::NaiveClassifier { fixed_x: vec![x] }),
        (1usize..1000, any::<u64>(), any::<bool>())
            .prop_map(|(samples, seed, best_response)| Regime::SampledGradient { samples, seed, best_response }),
    ]
}

prop_compose! {
    fn config_strategy()(
        regime in regime_strategy(),
        lower in -10.0f64..0.0,
        width in 0.5f64..20.0,
        cells in 4usize..400,
        alpha in 1e-3f64..10.0,
        beta in 1e-3f64..10.0,
        slope in 0.1f64..5.0,
        anchor in -3.0f64..3.0,
        start in -3.0f64..3.0,
        kernel in prop_oneof![
            Just(KernelSpec::None),
            (0.01f64..1.0).prop_map(KernelSpec::Quadratic),
            (0.01f64..1.0).prop_map(KernelSpec::Consensus),
        ],
        means in prop::array::uniform3(-2.0f64..2.0),
        variances in prop::array::uniform3(0.01f64..2.0),
        final_time in 0.0f64..100.0,
        dt in 1e-4f64..0.1,
        cfl in 0.05f64..1.0,
        sample_stride in 1usize..100,
        snapshot_stride in 1usize..100,
    ) -> ScenarioConfig {
        ScenarioConfig {
            name: "generated".into(),
            regime,
            lower: vec![lower],
            upper: vec![lower + width],
            cells: vec![cells],
            alpha,
            beta,
            cost: CostSpec::Logistic,
            slope,
            anchor: vec![anchor],
            initial_x: vec![start],
            kernel,
            reference: gaussian_spec(means[0], variances[0]),
            static_population: gaussian_spec(means[1], variances[1]),
            initial: gaussian_spec(means[2], variances[2]),
            tau_reference: None,
            tau_initial: None,
            final_time,
            dt,
            cfl,
            sample_stride,
            snapshot_stride,
            output_dir: PathBuf::from("/tmp/driftflow-generated"),
        }
    }
}

/// Random nonnegative density with at least one positive cell.
fn density_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0, 1e-12f64..1e-9], n)
        .prop_filter("needs mass", |v| v.iter().sum::<f64>() > 1e-6)
}

/// Piecewise-linear CDF of a cell-constant density.
fn cdf_at(rho: &Density, z: f64) -> f64 {
    let axis = rho.grid().axis(0);
    let h = axis.width();
    let cdf = rho.cell_cdf();
    let pos = ((z - axis.lower) / h).clamp(0.0, axis.cells as f64);
    let i = (pos.floor() as usize).min(axis.cells - 1);
    let before = if i == 0 { 0.0 } else { cdf[i - 1] };
    before + (pos - i as f64) * rho.values()[i] * h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in config_strategy()) {
        let text = write_config(&cfg);
        let back = ScenarioConfig::parse(&text, Path::new("/tmp")).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn step_conserves_mass_and_positivity(
        (values, xi) in (4usize..80).prop_flat_map(|n| (density_values(n), prop::collection::vec(-5.0f64..5.0, n))),
        descent in any::<bool>(),
        frac in 0.05f64..1.0,
    ) {
        let g = line(-2.0, 3.0, values.len());
        let rho = Density::from_values(g.clone(), values).unwrap();
        let dir = if descent { Direction::Descent } else { Direction::Ascent };
        let u = fv::face_velocities(&xi, &g, dir).unwrap();
        let dt = frac * fv::cfl_dt(&u, 1.0).unwrap().min(fv::positivity_dt(&u)).min(1.0);
        let (next, report) = fv::step(&rho, &u, dt).unwrap();
        prop_assert!((next.mass() - rho.mass()).abs() <= 1e-12);
        prop_assert!(report.mass_drift.abs() <= 1e-12);
        prop_assert!(next.min_value() >= 0.0);
    }

    #[test]
    fn step2d_conserves_mass_and_positivity(
        (values, xi) in (4usize..12, 4usize..12).prop_flat_map(|(nx, ny)| {
            (density_values(nx * ny), prop::collection::vec(-3.0f64..3.0, nx * ny), Just((nx, ny)))
        }).prop_map(|(v, x, dims)| ((v, dims), x)),
        frac in 0.05f64..1.0,
    ) {
        let (v, (nx, ny)) = values;
        let g = Arc::new(Grid::plane(Axis::new(-1.0, 1.0, nx).unwrap(), Axis::new(0.0, 2.0, ny).unwrap()).unwrap());
        let rho = Density::from_values(g.clone(), v).unwrap();
        let u = fv::face_velocities(&xi, &g, Direction::Descent).unwrap();
        let dt = frac * fv::cfl_dt(&u, 1.0).unwrap().min(fv::positivity_dt(&u)).min(1.0);
        let (next, _) = fv::step2d(&rho, &xi, Direction::Descent, dt).unwrap();
        prop_assert!((next.mass() - 1.0).abs() <= 1e-12);
        prop_assert!(next.min_value() >= 0.0);
    }

    #[test]
    fn velocities_scale_with_the_field(
        xi in prop::collection::vec(-5.0f64..5.0, 4..60),
        c in 0.01f64..100.0,
    ) {
        let g = line(0.0, 1.0, xi.len());
        let u = fv::face_velocities(&xi, &g, Direction::Descent).unwrap();
        let scaled: Vec<f64> = xi.iter().map(|v| c * v).collect();
        let uc = fv::face_velocities(&scaled, &g, Direction::Descent).unwrap();
        for (a, b) in u.axis(0).iter().zip(uc.axis(0)) {
            prop_assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let (p, pc) = (fv::positivity_dt(&u), fv::positivity_dt(&uc));
        if p.is_finite() {
            prop_assert!((p / c - pc).abs() <= 1e-9 * pc);
        }
        // adding a constant does not change the transport
        let shifted: Vec<f64> = xi.iter().map(|v| v + 7.5).collect();
        let us = fv::face_velocities(&shifted, &g, Direction::Descent).unwrap();
        for (a, b) in u.axis(0).iter().zip(us.axis(0)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn w2_is_a_metric(
        (a, b, c) in (8usize..60).prop_flat_map(|n| (density_values(n), density_values(n), density_values(n))),
    ) {
        let g = line(-1.0, 2.0, a.len());
        let (a, b, c) = (
            Density::from_values(g.clone(), a).unwrap(),
            Density::from_values(g.clone(), b).unwrap(),
            Density::from_values(g, c).unwrap(),
        );
        let ab = wasserstein2_1d(&a, &b).unwrap();
        let ba = wasserstein2_1d(&b, &a).unwrap();
        let bc = wasserstein2_1d(&b, &c).unwrap();
        let ac = wasserstein2_1d(&a, &c).unwrap();
        prop_assert_eq!(wasserstein2_1d(&a, &a).unwrap(), 0.0);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn w2_of_a_translation_is_the_shift(m in -1.0f64..1.0, d in -1.0f64..1.0, v in 0.05f64..0.5) {
        let g = line(-6.0, 6.0, 600);
        let a = Density::gaussian(g.clone(), &[m], &[v]).unwrap();
        let b = Density::gaussian(g, &[m + d], &[v]).unwrap();
        prop_assert!((wasserstein2_1d(&a, &b).unwrap() - d.abs()).abs() <= 2e-3);
    }

    #[test]
    fn samples_follow_the_density(values in density_values(30), seed in any::<u64>()) {
        let g = line(-1.0, 2.0, values.len());
        let rho = Density::from_values(g, values).unwrap();
        let n = 4000;
        let mut pts: Vec<f64> = rho.sample(n, seed).coords().to_vec();
        pts.sort_by(f64::total_cmp);
        let ks = pts
            .iter()
            .enumerate()
            .map(|(k, z)| {
                let f = cdf_at(&rho, *z);
                (f - k as f64 / n as f64).abs().max(((k + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // critical value at significance ~1e-4
        prop_assert!(ks <= 2.2 / (n as f64).sqrt(), "KS statistic {}", ks);
    }

    #[test]
    fn sampling_is_deterministic(values in density_values(20), seed in any::<u64>()) {
        let g = line(0.0, 1.0, values.len());
        let rho = Density::from_values(g, values).unwrap();
        let (a, b) = (rho.sample(50, seed), rho.sample(50, seed));
        prop_assert_eq!(a.coords(), b.coords());
    }
}
