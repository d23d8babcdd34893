use std::io::Write;

fn main() {
    let (code, out, err) = ftppi_cli::main_with_args(std::env::args_os());
    print!("{out}");
    let _ = std::io::stdout().flush();
    eprint!("{err}");
    std::process::exit(code);
}
