fn main() {
    std::process::exit(sar_core::cli::run_cli(std::env::args_os()));
}
