fn main() {
    std::process::exit(cacps::cli::main_with_args(std::env::args_os()));
}
