fn main() {
    std::process::exit(iir_cli::run(std::env::args_os()));
}
