fn main() {
    std::process::exit(mdl::cli::run(std::env::args_os()));
}
