fn main() {
    std::process::exit(mgcm_core::cli::run(std::env::args_os()));
}
