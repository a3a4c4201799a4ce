fn main() {
    std::process::exit(nthp::cli::run(std::env::args_os()));
}
