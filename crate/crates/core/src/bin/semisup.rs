fn main() -> std::process::ExitCode {
    semisup::cli::main()
}
