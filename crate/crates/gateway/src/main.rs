fn main() -> std::process::ExitCode {
    harmonkit::cli::main()
}
