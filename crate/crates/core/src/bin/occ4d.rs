fn main() -> std::process::ExitCode {
    occ4d::cli::main()
}
