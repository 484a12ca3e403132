fn main() {
    std::process::exit(scenebench_cli::run(std::env::args_os()));
}
