fn main() {
    std::process::exit(prefgate::cli::run(std::env::args()));
}
