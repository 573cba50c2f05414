fn main() {
    std::process::exit(blockprune::cli::run(std::env::args_os()));
}
