fn main() {
    std::process::exit(jointda::cli::run(std::env::args_os()));
}
