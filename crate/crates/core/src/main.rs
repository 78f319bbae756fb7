fn main() {
    std::process::exit(tandemfluid::cli::run(std::env::args_os()));
}
