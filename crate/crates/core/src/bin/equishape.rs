fn main() {
    std::process::exit(equishape::cli::run(std::env::args_os()));
}
