fn main() {
    std::process::exit(xaba::cli::run(std::env::args_os()));
}
