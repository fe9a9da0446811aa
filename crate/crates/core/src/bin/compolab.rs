fn main() {
    std::process::exit(compolab::cli::run(std::env::args_os()));
}
