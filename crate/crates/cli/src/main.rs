fn main() {
    std::process::exit(countforge_cli::run(std::env::args_os()));
}
