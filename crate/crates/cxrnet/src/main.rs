fn main() -> std::process::ExitCode {
    cxrnet::cli::run(std::env::args_os())
}
