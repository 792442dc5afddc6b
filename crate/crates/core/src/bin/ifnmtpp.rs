fn main() {
    std::process::exit(ifnmtpp::cli::run(std::env::args_os()));
}
