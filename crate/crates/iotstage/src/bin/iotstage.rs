fn main() {
    std::process::exit(iotstage::cli::main_with_args(std::env::args_os()));
}
