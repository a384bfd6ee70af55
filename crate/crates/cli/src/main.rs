fn main() {
    std::process::exit(gsqa_cli::run(std::env::args_os()));
}
