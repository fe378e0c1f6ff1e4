fn main() {
    std::process::exit(gsrtr::cli::main_with(std::env::args_os()));
}
