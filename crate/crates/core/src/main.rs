fn main() {
    std::process::exit(prince_bart::cli::main_with_args(std::env::args_os()));
}
