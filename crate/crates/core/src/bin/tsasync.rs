fn main() {
    std::process::exit(tsasync::cli::main_with_args(std::env::args_os()));
}
