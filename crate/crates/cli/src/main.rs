fn main() {
    std::process::exit(proteus_cli::run_cli(std::env::args_os()));
}
