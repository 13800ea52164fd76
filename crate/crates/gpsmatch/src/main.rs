fn main() {
    std::process::exit(gpsmatch::cli::run());
}
