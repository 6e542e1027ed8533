fn main() {
    std::process::exit(gpprog::cli::main_with_args(std::env::args_os()));
}
