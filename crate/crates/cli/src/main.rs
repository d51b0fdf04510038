fn main() {
    anamnesis_cli::init_logging();
    std::process::exit(anamnesis_cli::run(std::env::args_os()));
}
