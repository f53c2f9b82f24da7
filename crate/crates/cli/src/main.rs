use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rrde_core::dataset::write_manifest;
use rrde_core::harness::{
    audit_split_isolation, emit_report, evaluate, run_experiment, ExperimentConfig, ExperimentData, ResultTable, Scale,
    CONFIG_FILE, RESULTS_FILE,
};

#[derive(Parser)]
#[command(name = "rrde", version, about = "Bootstrapped CNN ensembles with LSTM fusion for group happiness estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train and validation sets to <out>/train and <out>/validation.
    GenerateData(Common),
    /// Train every stage for the given seeds and write checkpoints plus results.csv.
    Train(Common),
    /// Rescore an earlier run from its checkpoints without training.
    Evaluate(Common),
    /// Train all seeds and write the full report.
    Sweep(Common),
    /// Rebuild summary and plot tables from <out>/results.csv.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file layered over the preset chosen by --scale.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only these seeds (repeatable).
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"], default_value = "desk")]
    scale: String,
    /// Seeds processed concurrently; overrides the config.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self, prefer_saved: bool) -> Result<ExperimentConfig> {
        let scale: Scale = self.scale.parse()?;
        let saved = self.out.as_ref().map(|o| o.join(CONFIG_FILE)).filter(|p| prefer_saved && p.exists());
        let mut cfg = match (&self.config, saved) {
            (Some(path), _) => ExperimentConfig::load(path, scale)?,
            (None, Some(path)) => ExperimentConfig::load(&path, scale)?,
            (None, None) => ExperimentConfig::preset(scale),
        };
        if let Some(out) = &self.out {
            cfg.experiment.out_dir = out.clone();
        }
        if !self.seed.is_empty() {
            cfg.experiment.seeds = self.seed.clone();
        }
        if let Some(w) = self.workers {
            cfg.experiment.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    ExperimentData::load(cfg).context("loading data")
}

fn finish(table: &ResultTable) -> ExitCode {
    let failed = table.failed().count();
    if failed == 0 {
        eprintln!("{} rows, all cells completed", table.rows.len());
        ExitCode::SUCCESS
    } else {
        for r in table.failed() {
            eprintln!(
                "failed: seed {} {} n={} {} {}: {}",
                r.seed,
                r.pipeline,
                r.ensemble_size,
                r.model,
                r.split,
                r.error.as_deref().unwrap_or("")
            );
        }
        eprintln!("{failed} of {} cells failed", table.rows.len());
        ExitCode::from(2)
    }
}

fn write_results(table: &ResultTable, out: &Path) -> Result<()> {
    let path = out.join(RESULTS_FILE);
    std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = c.resolve(false)?;
            if cfg.data.train_manifest.is_some() {
                bail!("the config reads manifests from disk; nothing to generate");
            }
            let data = load_data(&cfg)?;
            let out = &cfg.experiment.out_dir;
            write_manifest(&data.train, out.join("train"))?;
            write_manifest(&data.validation, out.join("validation"))?;
            eprintln!(
                "wrote {} train and {} validation faces under {}",
                data.train.face_count(),
                data.validation.face_count(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(c) => {
            let cfg = c.resolve(false)?;
            let data = load_data(&cfg)?;
            let table = run_experiment(&cfg, &data, Some(&progress))?;
            audit_split_isolation(&cfg, &data)?;
            write_results(&table, &cfg.experiment.out_dir)?;
            Ok(finish(&table))
        }
        Command::Sweep(c) => {
            let cfg = c.resolve(false)?;
            let data = load_data(&cfg)?;
            let table = run_experiment(&cfg, &data, Some(&progress))?;
            audit_split_isolation(&cfg, &data)?;
            emit_report(&table, &cfg.experiment.out_dir)?;
            Ok(finish(&table))
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve(true)?;
            let data = load_data(&cfg)?;
            audit_split_isolation(&cfg, &data)?;
            let table = evaluate(&cfg, &data, Some(&progress))?;
            emit_report(&table, &cfg.experiment.out_dir)?;
            Ok(finish(&table))
        }
        Command::Report(c) => {
            let out = c.out.clone().unwrap_or_else(|| ExperimentConfig::desk().experiment.out_dir);
            let path = out.join(RESULTS_FILE);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let table = ResultTable::from_csv(&text)?;
            emit_report(&table, &out)?;
            Ok(finish(&table))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
