fn main() {
    std::process::exit(ixvector::cli::run(std::env::args_os()));
}
