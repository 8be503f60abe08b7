fn main() {
    std::process::exit(figcap::cli::run(std::env::args_os()));
}
