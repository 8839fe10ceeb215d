fn main() {
    std::process::exit(forge_cli::dispatch(std::env::args_os()));
}
