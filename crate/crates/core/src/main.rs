fn main() {
    std::process::exit(egpo::cli::run(std::env::args_os()));
}
