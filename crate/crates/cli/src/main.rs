fn main() {
    std::process::exit(unitprobe_cli::run(std::env::args_os()));
}
