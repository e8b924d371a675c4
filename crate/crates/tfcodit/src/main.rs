use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfcodit::commands::{self, Anchors, GenerateRequest};
use tfcodit::error::{Error, Result};
use tfcodit::trainer::{LogRow, RunControl};
use tfcodit::RunConfig;

/// Text-conditioned synthesis of treasury-futures daily series.
///
/// Any config key can be overridden as `--section.key=value`
/// (for example `--train.vae_steps=200`).
#[derive(Debug, Parser)]
#[command(name = "tfcodit", version)]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// TS, TF, T or TL.
    #[arg(long, global = true)]
    contract: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a two-regime synthetic corpus with daily prompts.
    GenSynthetic,
    /// Normalize, split and cut windows and prompts for every horizon.
    Preprocess,
    /// Train the wavelet autoencoder.
    TrainVae(TrainArgs),
    /// Train the denoiser on autoencoder latents.
    TrainDiffusion(TrainArgs),
    /// Sample trajectories.
    Generate(GenerateArgs),
    /// Score generated trajectories against truth windows.
    Evaluate(EvaluateArgs),
    /// Run normalization and wavelet round-trip checks on the raw corpus.
    RoundtripCheck,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop and checkpoint before this step.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Periodic FinMAP prompt (JSON).
    #[arg(long, conflicts_with_all = ["null", "test_windows"])]
    prompt: Option<PathBuf>,
    /// Use the null condition.
    #[arg(long)]
    null: bool,
    /// Generate for every preprocessed test window.
    #[arg(long)]
    test_windows: bool,
    /// Trajectories per condition.
    #[arg(short = 'k', long, default_value_t = 1)]
    trajectories: usize,
    /// Normalization state JSON holding the anchors.
    #[arg(long, conflicts_with_all = ["anchor_open", "anchor_oi"])]
    anchors: Option<PathBuf>,
    /// Previous-day open price.
    #[arg(long, requires = "anchor_oi")]
    anchor_open: Option<f64>,
    /// Previous-day open interest.
    #[arg(long, requires = "anchor_open")]
    anchor_oi: Option<f64>,
    /// First generated date (with explicit anchors).
    #[arg(long, requires = "anchor_open")]
    start_date: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output file stem (defaults to the prompt file stem).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Generated trajectories (defaults to the output directory).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Truth windows (defaults to the preprocessed test windows).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Report directory (defaults to `<pred>/report`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Splits `--a.b=v` / `--a.b v` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(body) => match body.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| Error::Config(format!("--{body} needs a value")))?;
                    overrides.push((body.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(h) = cli.horizon {
        overrides.push(("horizon".into(), h.to_string()));
    }
    if let Some(c) = &cli.contract {
        let c = tfcodit_core::signal::Contract::parse(c).ok_or_else(|| Error::Config(format!("unknown contract {c:?}")))?;
        overrides.push(("contract".into(), format!("\"{c}\"")));
    }
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?),
        None => None,
    };
    RunConfig::from_sources(text.as_deref(), &overrides)
}

fn progress(every: usize) -> impl FnMut(&LogRow) {
    move |r: &LogRow| {
        if every > 0 && (r.step % every == 0) {
            eprintln!("step {:>6}  loss {:.6}  recon {:.6}  kl {:.6}  lr {:.2e}  |g| {:.4}", r.step, r.loss, r.recon, r.kl, r.lr, r.grad_norm);
        }
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let cfg = load_config(&cli, overrides)?;
    match cli.command {
        Command::GenSynthetic => {
            let p = commands::gen_synthetic(&cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Preprocess => {
            let contract = cli.contract.as_deref().map(|_| cfg.contract);
            for s in commands::preprocess(&cfg, contract)? {
                println!("{}: {} steps ({} train), prompts {}", s.contract, s.steps, s.train_steps, if s.prompts { "yes" } else { "no" });
                for (h, tr, te) in s.horizons {
                    println!("  h{h}: {tr} train windows, {te} test windows");
                }
            }
        }
        Command::TrainVae(a) => {
            let dir = commands::train_vae(&cfg, RunControl { resume: a.resume, stop_at: a.stop_at }, &mut progress(cfg.train.log_every))?;
            println!("checkpoint {}", dir.display());
        }
        Command::TrainDiffusion(a) => {
            let dir = commands::train_diffusion(&cfg, RunControl { resume: a.resume, stop_at: a.stop_at }, &mut progress(cfg.train.log_every))?;
            println!("checkpoint {}", dir.display());
        }
        Command::Generate(a) => {
            let anchors = match (a.anchors, a.anchor_open, a.anchor_oi) {
                (Some(p), _, _) => Some(Anchors::State(p)),
                (None, Some(open), Some(open_interest)) => Some(Anchors::Values { open, open_interest, start_date: a.start_date }),
                _ => None,
            };
            let req = GenerateRequest {
                prompt: a.prompt,
                anchors,
                trajectories: a.trajectories,
                out_dir: a.out,
                name: a.name,
                test_windows: a.test_windows,
                null: a.null,
            };
            let out = commands::generate_cmd(&cfg, &req)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate(a) => {
            let pred = a.pred.unwrap_or_else(|| cfg.output_dir());
            let truth = a.truth.unwrap_or_else(|| commands::layout(&cfg).truth_dir(cfg.contract, cfg.horizon));
            let out = a.out.unwrap_or_else(|| pred.join("report"));
            let eval = commands::evaluate_cmd(&pred, &truth, &out)?;
            print!("{}", eval.report.to_table());
        }
        Command::RoundtripCheck => {
            let results = commands::roundtrip_check(&cfg)?;
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{}: {} records, normalize rel err {:.3e}; {} windows, idwt err {:.3e}, energy rel err {:.3e}  {}",
                    r.contract,
                    r.records,
                    r.max_rel_norm_error,
                    r.windows,
                    r.max_wavelet_error,
                    r.max_energy_rel_error,
                    if r.passed() { "ok" } else { "FAILED" }
                );
                if !r.passed() {
                    failed.push(r.contract.to_string());
                }
            }
            if !failed.is_empty() {
                return Err(Error::CheckFailed(failed.join(", ")));
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn dotted_overrides_are_split_off() {
        let (rest, ov) = split_overrides(args("tfcodit --seed 3 --train.vae_steps=5 train-vae --uvae.kl_weight 0.1 --resume")).unwrap();
        assert_eq!(rest, args("tfcodit --seed 3 train-vae --resume"));
        assert_eq!(ov, vec![("train.vae_steps".into(), "5".into()), ("uvae.kl_weight".into(), "0.1".into())]);
        assert!(split_overrides(args("tfcodit --train.batch")).is_err());
    }

    #[test]
    fn cli_parses() {
        Cli::command().debug_assert();
        let cli = Cli::parse_from(args("tfcodit generate --prompt p.json -k 3 --horizon 8"));
        assert_eq!(cli.horizon, Some(8));
        assert!(matches!(cli.command, Command::Generate(GenerateArgs { trajectories: 3, .. })));
    }

    use clap::CommandFactory;
}
