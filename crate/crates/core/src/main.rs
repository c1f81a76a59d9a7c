fn main() {
    std::process::exit(quasid::cli::run(std::env::args_os()));
}
