use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dtnet_cli::commands;
use dtnet_cli::config::RunConfig;
use dtnet_cli::error::{CliError, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenData,
    Train,
    Eval,
    RouteInspect,
    DiverseSample,
}

#[derive(Parser, Debug)]
#[command(
    name = "dtnet",
    about = "Routed transformer captioner on synthetic feature grids",
    after_help = "Every config key is accepted as `--key value` and overrides the file given by \
                  --config. The effective config is written to config.txt in the run directory."
)]
struct Cli {
    command: Command,
    /// `--key value` overrides, plus `--config path`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

/// Splits `--config` from the overrides and collects malformed flags.
fn parse_flags(args: &[String]) -> (Option<PathBuf>, Vec<(String, String)>, Vec<String>) {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            bad.push(format!("unexpected argument {a:?}, expected --key value"));
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => match it.next_if(|v| !v.starts_with("--")) {
                Some(v) => (flag.to_owned(), v.clone()),
                None => {
                    bad.push(format!("--{flag}: missing value"));
                    continue;
                }
            },
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    (config, pairs, bad)
}

/// File values, then flag overrides; every bad flag, key or value is
/// reported in one error.
fn effective_config(args: &[String]) -> Result<RunConfig> {
    let (file, pairs, mut bad) = parse_flags(args);
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::default(),
    };
    if let Err(CliError::Config(list)) = cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))) {
        bad.extend(list);
    }
    if bad.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(bad))
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(&cli.args)?;
    match cli.command {
        Command::GenData => {
            let dir = commands::gen_data(&cfg)?;
            println!("data written to {}", dir.display());
        }
        Command::Train => {
            let out = commands::train(&cfg)?;
            println!("run directory {}", out.run_dir.display());
            println!("steps {} ce_epochs {}", out.steps, out.ce_epochs);
            if let Some(acc) = out.val_exact.last() {
                println!("val_exact {acc:.4}");
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval => {
            let out = commands::eval(&cfg)?;
            print!("{}", out.report);
        }
        Command::RouteInspect => {
            let out = commands::route_inspect(&cfg)?;
            println!("routes written to {}", out.run_dir.join("routes.tsv").display());
            print!("{}", out.report.histogram_text());
        }
        Command::DiverseSample => {
            let out = commands::diverse_sample(&cfg)?;
            for c in &out.captions {
                println!("{}\t{}", c.path.join(","), c.caption);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
