fn main() -> std::process::ExitCode {
    ctalign::cli::main()
}
