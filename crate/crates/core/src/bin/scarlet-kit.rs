fn main() {
    std::process::exit(scarlet_kit::cli::dispatch(std::env::args_os()));
}
