fn main() {
    std::process::exit(bergdpp::cli::run(std::env::args_os()));
}
