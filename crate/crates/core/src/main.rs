fn main() {
    std::process::exit(comuni::cli::run(std::env::args_os()));
}
