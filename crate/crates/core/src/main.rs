fn main() {
    std::process::exit(dynoframe::cli::run(std::env::args_os()));
}
