fn main() {
    std::process::exit(compresslab::cli::run());
}
