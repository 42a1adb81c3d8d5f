use std::process::ExitCode;

use clap::Parser;
use sliceworld_cli::{classify, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli
        .resolve()
        .map_err(anyhow::Error::from)
        .and_then(|cfg| {
            if let Some(j) = cfg.jobs {
                rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
            }
            run(cli.command, &cfg, &cli.out_root(&cfg))
        });
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = serde_json::json!({
                "error": kind,
                "command": cli.command.as_str(),
                "message": format!("{e:#}"),
            });
            eprintln!("{msg}");
            ExitCode::from(code as u8)
        }
    }
}
