fn main() -> std::process::ExitCode {
    viewforge::cli::run()
}
