fn main() {
    std::process::exit(autofi::cli::run(std::env::args_os()));
}
