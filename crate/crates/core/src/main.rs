fn main() {
    std::process::exit(dcn::cli::run(std::env::args_os()));
}
