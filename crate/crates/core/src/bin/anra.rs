fn main() {
    std::process::exit(anra::cli::run());
}
