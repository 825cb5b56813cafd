fn main() -> std::process::ExitCode {
    emso::cli::main()
}
