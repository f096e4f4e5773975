fn main() {
    std::process::exit(deca_cli::run(std::env::args_os()));
}
