fn main() {
    std::process::exit(dvbe::cli::run(std::env::args_os()));
}
