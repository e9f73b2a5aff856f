fn main() {
    env_logger::init();
    std::process::exit(knr_spectra::cli::run(std::env::args_os()));
}
