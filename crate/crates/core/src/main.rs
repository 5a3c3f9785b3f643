fn main() {
    std::process::exit(mvmeta::cli::run(std::env::args_os()));
}
