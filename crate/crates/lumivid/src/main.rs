fn main() {
    std::process::exit(lumivid::cli::run(std::env::args_os()));
}
