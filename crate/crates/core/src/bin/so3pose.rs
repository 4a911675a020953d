fn main() {
    std::process::exit(so3pose::cli::run_from_args(std::env::args_os()));
}
