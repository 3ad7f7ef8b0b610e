fn main() -> std::process::ExitCode {
    nep_service::cli::main()
}
