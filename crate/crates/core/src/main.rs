fn main() {
    std::process::exit(codepred::cli::run(std::env::args_os()));
}
