fn main() {
    std::process::exit(gpmkl_cli::run(std::env::args_os()));
}
