fn main() {
    std::process::exit(anett::experiments::cli(std::env::args().collect()));
}
