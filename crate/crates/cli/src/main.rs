fn main() {
    std::process::exit(hidec_cli::run(std::env::args_os()));
}
