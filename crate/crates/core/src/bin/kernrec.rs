fn main() {
    std::process::exit(kernrec::harness::cli::run_cli(std::env::args_os()));
}
