fn main() {
    std::process::exit(cgmatch::cli::run());
}
