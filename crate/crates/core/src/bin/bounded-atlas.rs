fn main() {
    std::process::exit(bounded_atlas::cli::main_with_args(std::env::args_os()));
}
