fn main() {
    std::process::exit(mfssd::cli::run(std::env::args_os()));
}
