fn main() {
    std::process::exit(gee_cli::run(std::env::args_os()));
}
