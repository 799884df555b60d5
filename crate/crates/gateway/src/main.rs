fn main() -> std::process::ExitCode {
    cellpilot_gateway::cli::main()
}
