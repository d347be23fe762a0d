fn main() {
    std::process::exit(causal_chips::cli::run(std::env::args_os()));
}
