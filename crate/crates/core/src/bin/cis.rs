fn main() {
    std::process::exit(cis_core::cli::run(std::env::args_os()));
}
