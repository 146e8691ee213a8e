fn main() {
    std::process::exit(ntk_core::cli::run(std::env::args_os()));
}
