fn main() {
    std::process::exit(histossl::cli::run(std::env::args_os()));
}
