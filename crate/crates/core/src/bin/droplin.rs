fn main() {
    std::process::exit(droplin::cli::main_with_args(std::env::args_os()));
}
