fn main() {
    std::process::exit(caltok::cli::run(std::env::args_os()));
}
