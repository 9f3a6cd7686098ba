use clap::Parser;
use nanocontrol_cli::commands::{run, Cli};
use nanocontrol_cli::{CliError, Code};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return;
        }
        Err(e) => {
            let first =
                e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            let err = CliError::new(Code::Config, first);
            eprintln!("{err}");
            std::process::exit(Code::Config.exit_code());
        }
    };
    if let Err(e) = run(cli, &mut std::io::stdout().lock()) {
        eprintln!("{e}");
        std::process::exit(e.code.exit_code());
    }
}
