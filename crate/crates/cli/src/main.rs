fn main() {
    std::process::exit(envae_cli::run_command(std::env::args_os()));
}
