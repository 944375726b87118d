fn main() {
    std::process::exit(modmask_cli::run(std::env::args_os()));
}
