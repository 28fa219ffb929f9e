"""Smoke test for the pydriftflow extension module.

Build and install first, e.g. `pip install ./crates/py`, then run
`python python/smoke_test.py` from the repository root.
"""

import math
import tempfile
from pathlib import Path

import pydriftflow as dff

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    grid = dff.Grid.line(-4.0, 4.0, 160)
    a = dff.Density.gaussian(grid, [0.0], [0.25])
    b = dff.Density.gaussian(grid, [0.5], [0.25])
    assert abs(a.mass - 1.0) < 1e-12
    assert abs(a.mean[0]) < 1e-9
    assert abs(dff.wasserstein2(a, b) - 0.5) < 1e-2
    assert dff.count_modes(a) == 1
    assert dff.kl(a, a) == 0.0 and dff.kl(b, a) > 0.0

    cfg = dff.Config.load(CONFIGS / "competitive_fastrho.cfg")
    model = cfg.model()
    rho0 = cfg.initial_density()
    x = dff.best_response_x(rho0, model)
    assert max(abs(g) for g in model.grad_x(rho0, x)) < 1e-8
    r = dff.best_response_rho(x, model)
    assert abs(r.mass - 1.0) < 1e-9

    rho_star, x_star = dff.equilibrium(model, [1.5])
    traj = cfg.simulate()
    assert len(traj) == len(traj.times) == len(traj.x)
    assert abs(traj.x[-1][0] - x_star[0]) < 1e-3
    assert dff.wasserstein2(traj.density(-1), rho_star) < 1e-2
    assert traj.max_step_drift <= 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        out, relax = dff.run(CONFIGS / "pure_relaxation.cfg", out=Path(tmp) / "run")
        assert (Path(out) / "energy.csv").is_file()
        passed, verdicts = dff.check(CONFIGS / "pure_relaxation.cfg", out=Path(tmp) / "check")
        assert passed, verdicts
        table = dff.compare(CONFIGS / "naive_vs_gd.cfg", CONFIGS / "competitive_1d.cfg", out=Path(tmp) / "cmp")
        assert "classifier" in table
    assert all(math.isfinite(v) for v in relax.energies)

    try:
        dff.Config.parse("scenario.name = broken\n")
    except ValueError:
        pass
    else:
        raise AssertionError("an incomplete config must raise ValueError")

    print("pydriftflow smoke test passed")


if __name__ == "__main__":
    main()
