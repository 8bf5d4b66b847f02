fn main() {
    std::process::exit(star_kgc::cli::run(std::env::args_os()));
}
