fn main() -> std::process::ExitCode {
    versapants::cli::main_with_args(std::env::args_os())
}
