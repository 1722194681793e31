fn main() {
    std::process::exit(protohier::cli::run(std::env::args_os()));
}
