fn main() {
    std::process::exit(pascal::cli::run(std::env::args_os()));
}
