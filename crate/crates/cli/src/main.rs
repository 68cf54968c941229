fn main() {
    std::process::exit(longdoc_cli::run(std::env::args_os()));
}
