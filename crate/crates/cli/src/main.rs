fn main() {
    title_forge_cli::init_logging();
    std::process::exit(title_forge_cli::run(std::env::args_os()));
}
