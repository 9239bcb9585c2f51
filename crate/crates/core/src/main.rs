fn main() {
    std::process::exit(advfield::cli::main_with_args(std::env::args_os()));
}
