fn main() {
    std::process::exit(fabr::cli::run(std::env::args_os()));
}
