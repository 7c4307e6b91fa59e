fn main() {
    std::process::exit(condnet::cli::main_from(std::env::args_os()));
}
