fn main() {
    std::process::exit(cvar_control::cli::main_with_args(std::env::args_os()));
}
