fn main() {
    std::process::exit(himap::cli::run(std::env::args_os()));
}
