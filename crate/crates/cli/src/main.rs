fn main() {
    std::process::exit(tinc_cli::main_with_args(std::env::args_os()));
}
