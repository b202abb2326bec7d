fn main() {
    std::process::exit(texid_cli::cli::main_with(std::env::args_os()));
}
