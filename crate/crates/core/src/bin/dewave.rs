fn main() {
    std::process::exit(dewave::cli::main_with_args(std::env::args_os()));
}
