fn main() {
    std::process::exit(convdr::cli::run(std::env::args_os()));
}
