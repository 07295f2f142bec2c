fn main() {
    let code = contextual_flux::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
