fn main() {
    std::process::exit(lpcc::cli::main_with_args(std::env::args()));
}
