fn main() {
    std::process::exit(dfcr::cli::run(std::env::args_os()));
}
