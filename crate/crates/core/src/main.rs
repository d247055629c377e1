fn main() {
    std::process::exit(mocose::cli::run(std::env::args_os()));
}
