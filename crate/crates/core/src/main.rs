fn main() {
    std::process::exit(mode_lab::cli::main_with_args(std::env::args_os()));
}
