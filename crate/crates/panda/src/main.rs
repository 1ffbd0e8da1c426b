fn main() {
    std::process::exit(panda::cli::run(std::env::args_os()));
}
