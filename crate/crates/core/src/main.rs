fn main() {
    std::process::exit(dgd_core::cli::run(std::env::args_os()));
}
