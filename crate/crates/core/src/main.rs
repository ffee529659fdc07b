fn main() {
    std::process::exit(qlag::cli::run(std::env::args_os()));
}
