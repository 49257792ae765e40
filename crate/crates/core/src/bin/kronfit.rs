fn main() {
    std::process::exit(kronfit::cli::main_with_args(std::env::args_os()));
}
