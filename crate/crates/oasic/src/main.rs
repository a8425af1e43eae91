fn main() {
    std::process::exit(oasic::cli::run(std::env::args_os()));
}
