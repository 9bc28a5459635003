fn main() -> std::process::ExitCode {
    gka_cli::main_entry()
}
