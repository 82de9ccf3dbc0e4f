fn main() {
    std::process::exit(snkb::cli::run(std::env::args_os()));
}
