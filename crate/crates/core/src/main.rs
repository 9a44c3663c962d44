fn main() {
    std::process::exit(esketch::cli::run());
}
