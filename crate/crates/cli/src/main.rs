fn main() {
    std::process::exit(mvc_cli::run_command(std::env::args_os()));
}
