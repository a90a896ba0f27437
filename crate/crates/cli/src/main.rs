fn main() {
    std::process::exit(singular_lq_cli::main_with_args(std::env::args_os()));
}
