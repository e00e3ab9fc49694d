fn main() {
    let code = mtn_tct::cli::run_cli(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
