fn main() {
    std::process::exit(psf_unmix_cli::run(std::env::args_os()));
}
