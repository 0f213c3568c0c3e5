fn main() {
    std::process::exit(imbalance_kit::cli::main_with_args(std::env::args_os()));
}
