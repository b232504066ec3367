//! Command-line front end: run calibration, the six intervention families,
//! toy-model generation, and plot re-export against a saved model directory.
//!
//! Exit codes: 0 success, 2 configuration or usage errors, 3 data or
//! tokenization errors, 4 numeric failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use conftrace::harness::template::resolve_lexicon;
use conftrace::harness::{
    calibrate, export_calibration, export_plots, export_results, load_trials, run_experiment,
    save_trials, ExperimentConfig, ExperimentKind, PromptTemplate,
};
use conftrace::model::ModelBundle;
use conftrace::toycircuit::{build_planted_model, gen_planted_trials, PlantedSidecar, PlantedSpec};
use conftrace::{Error, Result};

#[derive(Parser)]
#[command(
    name = "conftrace",
    version,
    about = "Trace how a transformer computes verbal confidence, one intervention at a time"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment family.
#[derive(Args)]
struct RunArgs {
    /// model directory (config.json, vocab.json, weights)
    #[arg(long, value_name = "DIR")]
    model: PathBuf,
    /// trials as JSON lines
    #[arg(long, value_name = "FILE")]
    trials: PathBuf,
    /// experiment config JSON; defaults sweep every layer
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// output directory for CSV/JSON tables
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// overrides the config seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// overrides the config worker count
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_name = "DIR")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    trials: PathBuf,
    /// prompt template id or JSON path
    #[arg(long, value_name = "ID", default_value = "minimal0_9")]
    template: String,
    /// confidence lexicon id or JSON path; defaults to the template's
    #[arg(long, value_name = "ID")]
    lexicon: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Score baseline confidence calibration (ECE, AUROC, class histogram)
    Calibrate(CalibrateArgs),
    /// Add a confidence direction to the residual stream
    Steer(RunArgs),
    /// Corrupt answer embeddings, then restore single sites from clean runs
    Patch(RunArgs),
    /// Overwrite single sites with calibration-set mean residuals
    Noise(RunArgs),
    /// Transplant residuals between shape-matched trials
    Swap(RunArgs),
    /// Sever attention edges over a layer window
    #[command(name = "block-attn")]
    BlockAttn(RunArgs),
    /// Cross-validated linear probes on captured residuals
    Probe(RunArgs),
    /// Write the planted cache-and-retrieve model plus its sidecar
    GenToy {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// weight-noise seed; also seeds the correctness table
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Generate trials from a planted model's sidecar
    GenSynthetic {
        /// model directory containing planted.json
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        /// output JSONL path
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 200)]
        n: usize,
        /// overrides the sidecar's trial seed
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Rebuild a plot CSV from a previously written aggregate JSON
    ExportPlots {
        #[arg(long, value_name = "FILE")]
        aggregate: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Calibrate(args) => run_calibrate(args),
        Command::Steer(args) => run_family(ExperimentKind::Steer, args),
        Command::Patch(args) => run_family(ExperimentKind::Patch, args),
        Command::Noise(args) => run_family(ExperimentKind::Noise, args),
        Command::Swap(args) => run_family(ExperimentKind::Swap, args),
        Command::BlockAttn(args) => run_family(ExperimentKind::Block, args),
        Command::Probe(args) => run_family(ExperimentKind::Probe, args),
        Command::GenToy { out, seed } => run_gen_toy(out, seed),
        Command::GenSynthetic {
            model,
            out,
            n,
            seed,
        } => run_gen_synthetic(model, out, n, seed),
        Command::ExportPlots { aggregate, out } => {
            let path = export_plots(&aggregate, &out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn load_config(
    kind: ExperimentKind,
    args: &RunArgs,
    model: &ModelBundle,
) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let config = ExperimentConfig::from_json(&text)?;
            if config.experiment != kind {
                return Err(Error::Config(format!(
                    "config is for `{}` but the subcommand runs `{}`",
                    config.experiment.name(),
                    kind.name()
                )));
            }
            config
        }
        None => ExperimentConfig::new(kind, (0..model.config.n_layers).collect()),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    Ok(config)
}

fn run_family(kind: ExperimentKind, args: RunArgs) -> Result<()> {
    let model = ModelBundle::load(&args.model)?;
    let config = load_config(kind, &args, &model)?;
    let template = PromptTemplate::resolve(&config.template)?;
    config.validate(&model, &template)?;
    let trials = load_trials(&args.trials, &model.vocab, &template)?;
    let output = run_experiment(&config, &model, &trials)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Data(format!("{}: {e}", args.out.display())))?;
    let resolved = serde_json::to_string_pretty(&config)?;
    std::fs::write(args.out.join("config.json"), resolved)
        .map_err(|e| Error::Data(format!("{}: {e}", args.out.display())))?;
    let written = export_results(&args.out, &output)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    let invalid = output.metrics.iter().filter(|m| m.invalid).count();
    if invalid > 0 {
        eprintln!("warning: {invalid} cell(s) exceeded the abort budget and are marked invalid");
    }
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let model = ModelBundle::load(&args.model)?;
    let template = PromptTemplate::resolve(&args.template)?;
    let lexicon = resolve_lexicon(args.lexicon.as_deref().unwrap_or(&template.lexicon))?;
    let trials = load_trials(&args.trials, &model.vocab, &template)?;
    let report = calibrate(&model, &lexicon, &trials, args.workers)?;
    let written = export_calibration(&args.out, &report)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    println!(
        "n={} excluded={} accuracy={:.4} ece={:.4} auroc={:.4}",
        report.n, report.n_excluded, report.accuracy, report.ece.ece, report.auroc
    );
    Ok(())
}

fn run_gen_toy(out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut spec = PlantedSpec::default();
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (model, _) = build_planted_model(&spec)?;
    model.save(&out)?;
    let sidecar = PlantedSidecar::new(&spec, spec.seed.wrapping_add(1));
    let text = serde_json::to_string_pretty(&sidecar)?;
    let path = out.join("planted.json");
    std::fs::write(&path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    println!(
        "wrote planted model to {} ({} layers, d_model {}, vocab {})",
        out.display(),
        model.config.n_layers,
        model.config.d_model,
        model.vocab.len()
    );
    Ok(())
}

fn run_gen_synthetic(model_dir: PathBuf, out: PathBuf, n: usize, seed: Option<u64>) -> Result<()> {
    let path = model_dir.join("planted.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let sidecar: PlantedSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let trial_seed = seed.unwrap_or(sidecar.trial_seed);
    let trials = gen_planted_trials(n, trial_seed, &sidecar.correctness)?;
    save_trials(&out, &trials)?;
    println!("wrote {} trials to {}", trials.len(), out.display());
    Ok(())
}
