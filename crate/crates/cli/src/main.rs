fn main() {
    std::process::exit(patchlikely_cli::run(std::env::args_os()));
}
