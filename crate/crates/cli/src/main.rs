use clap::Parser;

fn main() {
    let cli = varcurv_cli::Cli::parse();
    match varcurv_cli::execute(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(varcurv_cli::exit_code(&e));
        }
    }
}
