fn main() {
    std::process::exit(hydra_peft_cli::commands::main_with_args(std::env::args_os()));
}
