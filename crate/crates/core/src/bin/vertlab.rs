fn main() {
    std::process::exit(vertlab::cli::run(std::env::args_os()));
}
