//! `multinv` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use multinv::dataset::Regime;
use multinv::evaluation::{write_reports_text, EvalReport};
use multinv::harness::{render_report, run_ablation, run_experiment, AttackKind, ExperimentConfig, Run, ScenarioChoice};
use multinv::incorporation::{Mode, ModelsForTest};

#[derive(Parser)]
#[command(name = "multinv", version, about = "Multi-model inversion and membership-inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). The built-in toy config when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory of run artifacts.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// rand | concat | sr | srwal
    #[arg(long)]
    mode: Option<Mode>,
    /// final | all
    #[arg(long)]
    models_for_test: Option<ModelsForTest>,
    /// single | upslope | update | downslope
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioChoice>,
    /// feature-extraction | classification
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Probe set size, the attacker's training set size.
    #[arg(long)]
    probe_size: Option<usize>,
    /// Snapshot indices the attacker sees, e.g. `1,2`.
    #[arg(long, value_delimiter = ',')]
    snapshots: Option<Vec<usize>>,
    /// Attack training epochs.
    #[arg(long)]
    attack_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    ShowConfig(ConfigArgs),
    /// Load and split the corpus; optionally export it as PNG files.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        export_images: bool,
    },
    /// Train the target model and persist its snapshots.
    TrainTarget {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Retrain even when snapshots exist.
        #[arg(long)]
        retrain: bool,
    },
    /// Train and evaluate the inversion attack.
    AttackInvert(ConfigArgs),
    /// Train and evaluate the membership-inference attack.
    AttackMi(ConfigArgs),
    /// Re-evaluate a persisted attack.
    Evaluate(ConfigArgs),
    /// Repeat the attack for every configured snapshot subset.
    Ablate(ConfigArgs),
    /// Merge run reports into comparison tables and bar charts.
    Report {
        /// Run directories, e.g. runs/<hash>.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn parse_scenario(s: &str) -> Result<ScenarioChoice, String> {
    match s {
        "single" => Ok(ScenarioChoice::Single),
        "upslope" => Ok(ScenarioChoice::Upslope),
        "update" => Ok(ScenarioChoice::Update),
        "downslope" => Ok(ScenarioChoice::Downslope),
        _ => Err(format!("unknown scenario `{s}`")),
    }
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "feature-extraction" | "feature_extraction" => Ok(Regime::FeatureExtraction),
        "classification" => Ok(Regime::Classification),
        _ => Err(format!("unknown regime `{s}`")),
    }
}

impl ConfigArgs {
    fn resolve(&self, kind: Option<AttackKind>) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::toy(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mode {
            c.attack.mode = m;
        }
        if let Some(m) = self.models_for_test {
            c.attack.models_for_test = m;
        }
        if let Some(s) = self.scenario {
            c.target.scenario = s;
        }
        if let Some(r) = self.regime {
            c.dataset.regime = r;
            if r == Regime::Classification {
                c.target.train.loss = multinv::target_models::TargetLoss::Softmax;
            }
        }
        if let Some(n) = self.probe_size {
            c.dataset.probe_size = n;
        }
        if let Some(s) = &self.snapshots {
            c.attack.snapshot_subset = Some(s.clone());
        }
        if let Some(e) = self.attack_epochs {
            c.attack.inversion.epochs = e;
            c.attack.membership.epochs = e;
        }
        if let Some(k) = kind {
            c.attack.kind = k;
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_reports(reports: &[EvalReport]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    write_reports_text(reports, &mut out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ShowConfig(cfg) => print!("{}", cfg.resolve(None)?.to_toml()?),
        Command::Ingest { cfg, export_images } => {
            let run = Run::open(cfg.resolve(None)?, &cfg.runs)?;
            let data = run.data(export_images)?;
            println!(
                "{}: {} images, {} target_train, {} attack_train, {} attack_eval",
                run.dir.display(),
                data.corpus.samples.len(),
                data.split.target_train.len(),
                data.attack_train.len(),
                data.attack_eval.len()
            );
            for w in &data.corpus.warnings {
                log::warn!("{w}");
            }
        }
        Command::TrainTarget { cfg, retrain } => {
            let run = Run::open(cfg.resolve(None)?, &cfg.runs)?;
            let data = run.data(false)?;
            let set = run.targets(&data, retrain)?;
            println!(
                "{}: {} snapshots ({})",
                run.stage_dir("target").display(),
                set.alpha(),
                set.stages.iter().map(|s| s.tag.as_str()).collect::<Vec<_>>().join(", ")
            );
        }
        Command::AttackInvert(cfg) => {
            let outcome = run_experiment(&cfg.resolve(Some(AttackKind::Inversion))?, &cfg.runs)?;
            print_reports(&outcome.reports)?;
            println!("reports: {}", outcome.reports_csv.display());
        }
        Command::AttackMi(cfg) => {
            let outcome = run_experiment(&cfg.resolve(Some(AttackKind::Membership))?, &cfg.runs)?;
            print_reports(&outcome.reports)?;
            println!("reports: {}", outcome.reports_csv.display());
        }
        Command::Evaluate(cfg) => {
            let run = Run::open(cfg.resolve(None)?, &cfg.runs)?;
            let data = run.data(false)?;
            let set = run.existing_targets()?;
            let threshold = run.threshold(&data, &set)?;
            let reports = run.evaluate_saved(&data, &set, threshold.as_ref())?;
            let path = run.write_reports(&run.stage_dir("evaluation"), &reports)?;
            print_reports(&reports)?;
            println!("reports: {}", path.display());
        }
        Command::Ablate(cfg) => {
            let outcome = run_ablation(&cfg.resolve(None)?, &cfg.runs)?;
            print_reports(&outcome.reports)?;
            println!("reports: {}", outcome.reports_csv.display());
        }
        Command::Report { runs, out } => {
            let summary = render_report(&runs, &out)?;
            print!("{}", std::fs::read_to_string(&summary.table_txt)?);
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("table: {}", summary.table_csv.display());
            for p in &summary.plots {
                println!("plot: {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
