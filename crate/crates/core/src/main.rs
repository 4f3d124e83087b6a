use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybridseg::config::RunConfig;
use hybridseg::corpus::ContentClass;
use hybridseg::eval_explain::DEFAULT_UNCERTAINTY_BAND;
use hybridseg::run::{self, RunDir, StageSummary};
use hybridseg::segmenter::PlanId;
use hybridseg::Error;

/// Weakly and semi-supervised P/NP segmentation of hybrid film frames.
///
/// Every command works on the run directory `<output-dir>/<name>/` of the
/// configuration. The tensor device is chosen with HYBRIDSEG_DEVICE (only
/// `cpu` is available in this build).
///
/// Exit codes: 0 success, 2 usage error, 3 missing prerequisite stage,
/// 4 configuration digest mismatch, 1 any other failure.
#[derive(Parser, Debug)]
#[command(name = "hybridseg", version)]
struct Cli {
    /// TOML run configuration; defaults to the built-in miniature setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run name from the configuration.
    #[arg(long, global = true)]
    name: Option<String>,
    /// Overrides the parent directory of run directories.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the effective configuration as TOML to stdout.
    ShowConfig,
    /// Builds the corpus (synthesized, or imported from an external manifest).
    Synth {
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Assigns whole videos to train / val / test.
    Split {
        /// Overrides the split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains the proxy classifier on homogeneous frames.
    TrainProxy {
        /// Also trains both head modes and writes the ablation table.
        #[arg(long)]
        ablation: bool,
    },
    /// Scores the proxy classifier and lists boundary cases.
    EvalProxy {
        /// Uncertainty band of winning probabilities, as LO,HI.
        #[arg(long, value_parser = parse_band)]
        band: Option<(f64, f64)>,
    },
    /// Writes proxy masks for heterogeneous train and val frames.
    GenMasks,
    /// Trains one segmenter.
    TrainSeg {
        /// Training plan: A, B0, B1 or B2.
        #[arg(long, value_parser = parse_plan)]
        plan: PlanId,
    },
    /// Runs plans A, B0, B1 and B2 for every configured seed.
    RunLadder,
    /// Collects finished stage results into reports/report.txt.
    Report,
    /// Renders GradCAM heatmaps for boundary cases or chosen frames.
    Explain {
        /// Frame ids; defaults to the classifier's boundary cases.
        #[arg(long = "frame")]
        frames: Vec<String>,
        /// Class whose score is explained; defaults to the prediction.
        #[arg(long, value_parser = parse_class)]
        target: Option<ContentClass>,
        /// Uncertainty band used to pick boundary cases, as LO,HI.
        #[arg(long, value_parser = parse_band)]
        band: Option<(f64, f64)>,
    },
}

fn parse_plan(s: &str) -> Result<PlanId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_class(s: &str) -> Result<ContentClass, String> {
    match s.to_ascii_uppercase().as_str() {
        "P" => Ok(ContentClass::P),
        "NP" => Ok(ContentClass::NP),
        _ => Err(format!("expected P or NP, got {s:?}")),
    }
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad lower bound {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad upper bound {b:?}"))?;
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
        return Err(format!("band [{lo}, {hi}] must satisfy 0 <= LO <= HI <= 1"));
    }
    Ok((lo, hi))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingPrerequisite(_) => 3,
        Error::DigestMismatch(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> hybridseg::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = &cli.name {
        cfg.name = n.clone();
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    match cli.command {
        Command::Synth { seed: Some(s) } => cfg.corpus.seed = s,
        Command::Split { seed: Some(s) } => cfg.split.seed = s,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> hybridseg::Result<Option<StageSummary>> {
    let cfg = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(None);
    }
    let dir = RunDir::open(cfg)?;
    let band = |b: &Option<(f64, f64)>| b.unwrap_or(DEFAULT_UNCERTAINTY_BAND);
    let summary = match &cli.command {
        Command::ShowConfig => unreachable!("handled above"),
        Command::Synth { .. } => run::stage_synth(&dir)?,
        Command::Split { .. } => run::stage_split(&dir)?,
        Command::TrainProxy { ablation } => run::stage_train_proxy(&dir, *ablation)?,
        Command::EvalProxy { band: b } => run::stage_eval_proxy(&dir, band(b))?,
        Command::GenMasks => run::stage_gen_masks(&dir)?,
        Command::TrainSeg { plan } => run::stage_train_seg(&dir, *plan)?,
        Command::RunLadder => {
            let (s, report) = run::stage_run_ladder(&dir)?;
            print!("{}", run::ladder_text(&report)?);
            s
        }
        Command::Report => {
            let s = run::stage_report(&dir)?;
            print!("{}", s.data["text"].as_str().unwrap_or_default());
            s
        }
        Command::Explain { frames, target, band: b } => run::stage_explain(&dir, frames, *target, band(b))?,
    };
    Ok(Some(summary))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(Some(s)) => {
            println!("{} done; summary in reports/{}.json (configuration {})", s.stage, s.stage, s.config_digest);
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
