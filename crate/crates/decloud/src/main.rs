fn main() {
    std::process::exit(decloud::cli::run());
}
