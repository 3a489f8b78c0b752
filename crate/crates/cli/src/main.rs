fn main() {
    std::process::exit(vgloop_cli::run(std::env::args_os()));
}
