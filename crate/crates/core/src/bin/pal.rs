fn main() {
    std::process::exit(pal_core::cli::run(std::env::args_os()));
}
