fn main() {
    std::process::exit(fqr_core::cli::main_with_args(std::env::args_os()));
}
