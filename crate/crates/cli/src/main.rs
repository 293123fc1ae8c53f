fn main() {
    std::process::exit(poly_cli::run(std::env::args_os()));
}
