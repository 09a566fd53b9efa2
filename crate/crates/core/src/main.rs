fn main() {
    std::process::exit(gridcert::cli::run(std::env::args().collect()));
}
