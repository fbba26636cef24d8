fn main() -> std::process::ExitCode {
    nsanet::cli::main_entry()
}
