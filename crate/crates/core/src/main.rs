fn main() {
    std::process::exit(mapre::cli::main_with_args(std::env::args_os()));
}
