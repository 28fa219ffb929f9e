fn main() {
    std::process::exit(driftflow::cli::main_with(std::env::args_os()));
}
