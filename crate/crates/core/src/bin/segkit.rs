fn main() {
    std::process::exit(segkit::cli::run(std::env::args_os()));
}
