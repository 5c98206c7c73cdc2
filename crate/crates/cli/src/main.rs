fn main() {
    std::process::exit(revnet_cli::run(std::env::args_os()));
}
