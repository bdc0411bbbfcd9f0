fn main() {
    std::process::exit(tinytune_cli::run(std::env::args_os()));
}
