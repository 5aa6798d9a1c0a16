fn main() {
    std::process::exit(evbracket::cli::run(std::env::args_os()));
}
