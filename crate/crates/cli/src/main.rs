fn main() -> std::process::ExitCode {
    egclmil_cli::main_entry()
}
