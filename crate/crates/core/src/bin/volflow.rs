fn main() {
    std::process::exit(volflow::cli::main_with_args(std::env::args_os()));
}
