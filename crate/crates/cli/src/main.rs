fn main() {
    std::process::exit(breglearn_cli::run(std::env::args_os()));
}
