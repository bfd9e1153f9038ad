fn main() -> std::process::ExitCode {
    phaseplan::cli::main()
}
