fn main() {
    std::process::exit(advrec::cli::run(std::env::args_os()));
}
