fn main() {
    std::process::exit(markupdm::cli::run(std::env::args_os()));
}
