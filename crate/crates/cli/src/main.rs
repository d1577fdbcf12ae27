fn main() {
    std::process::exit(comanip_cli::run(std::env::args_os()));
}
