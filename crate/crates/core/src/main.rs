fn main() {
    std::process::exit(medeir::cli::dispatch(std::env::args_os()));
}
