fn main() {
    std::process::exit(sagnac::cli::main_with_args(std::env::args_os()));
}
