fn main() {
    std::process::exit(int2plan::cli::run(std::env::args_os().collect()));
}
