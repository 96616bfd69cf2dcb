fn main() {
    std::process::exit(sapo::cli::run(std::env::args_os()));
}
