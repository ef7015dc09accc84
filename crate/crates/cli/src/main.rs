fn main() {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    let code = vsf_cli::run_command(std::env::args_os(), &mut out, &mut err);
    std::process::exit(code);
}
