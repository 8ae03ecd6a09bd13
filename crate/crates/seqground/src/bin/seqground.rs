fn main() {
    std::process::exit(seqground::cli::run(std::env::args_os()));
}
