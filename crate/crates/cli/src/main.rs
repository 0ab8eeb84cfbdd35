fn main() {
    std::process::exit(iscr_cli::run(std::env::args_os()));
}
