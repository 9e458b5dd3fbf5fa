fn main() {
    std::process::exit(focalgen::cli::run(std::env::args_os(), &mut std::io::stdout()));
}
