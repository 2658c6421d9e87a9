fn main() {
    std::process::exit(pathflow::cli::main_with(std::env::args().collect()));
}
