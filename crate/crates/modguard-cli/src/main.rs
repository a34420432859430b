fn main() {
    std::process::exit(modguard_cli::run(std::env::args_os()));
}
