fn main() {
    std::process::exit(softprompt_cli::run(std::env::args_os()));
}
