fn main() {
    std::process::exit(muscle_eval::cli::run_command(std::env::args_os()));
}
