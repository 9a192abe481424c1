fn main() {
    std::process::exit(crr::cli::main_with_args(std::env::args_os()));
}
