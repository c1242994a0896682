fn main() {
    std::process::exit(tdrs_cli::run_cli(std::env::args_os()));
}
