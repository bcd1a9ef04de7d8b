fn main() {
    std::process::exit(flowkan::cli::main_with_args(std::env::args_os()));
}
