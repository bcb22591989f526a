fn main() {
    std::process::exit(noisecov::cli::main_with(std::env::args_os()));
}
