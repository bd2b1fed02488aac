fn main() {
    std::process::exit(diffmia::cli::run(std::env::args_os()));
}
