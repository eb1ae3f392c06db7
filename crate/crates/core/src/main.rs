fn main() {
    std::process::exit(coldchain::cli::main_with_args(std::env::args_os()));
}
