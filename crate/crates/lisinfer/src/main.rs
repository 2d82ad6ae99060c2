fn main() -> std::process::ExitCode {
    lisinfer::cli::main_entry()
}
