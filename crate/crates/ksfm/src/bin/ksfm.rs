fn main() {
    std::process::exit(ksfm::cli::run(std::env::args_os()));
}
