fn main() {
    std::process::exit(lapirn::cli::run(std::env::args_os()));
}
