fn main() {
    std::process::exit(wkgm_cli::run(std::env::args_os()));
}
