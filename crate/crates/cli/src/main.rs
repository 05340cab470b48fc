use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use busvar::pipeline::{run_pipeline, write_synthetic_inputs, Manifest, PipelineConfig, Stage};
use busvar::synth::{generate_city, SynthConfig};

/// Smart-card bus travel variability pipeline.
#[derive(Debug, Parser)]
#[command(name = "busvar", version)]
struct Cli {
    /// Configuration file: a pipeline config, or a synth config for `synth`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate a synthetic city and a pipeline config that runs on it.
    Synth,
    /// Parse taps, chain trips and select peak-period riders.
    Ingest,
    /// Compute per-rider spatial and temporal variability.
    Variability,
    /// Anchor riders onto the grid and aggregate per cell.
    Fuse,
    /// Global Moran's I of every aggregated field.
    Moran,
    /// Build per-cell feature tables.
    Features,
    /// Fit the boosted models.
    Fit,
    /// SHAP importance tables and dependence data.
    Explain,
    /// Every stage, ingest to explain.
    RunAll,
}

impl Verb {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Verb::Synth => return None,
            Verb::Ingest => Stage::Ingest,
            Verb::Variability => Stage::Variability,
            Verb::Fuse => Stage::Fuse,
            Verb::Moran => Stage::Moran,
            Verb::Features => Stage::Features,
            Verb::Fit => Stage::Fit,
            Verb::Explain | Verb::RunAll => Stage::Explain,
        })
    }
}

fn synth(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthConfig::from_toml(&text)?
        }
        None => SynthConfig::default(),
    };
    let dir = out.unwrap_or(Path::new("synthetic"));
    let city = generate_city(&cfg)?;
    info!(
        "stage=synth riders={} stops={} transactions={} malformed={}",
        cfg.n_riders,
        city.network.len(),
        city.transactions.len(),
        city.malformed_rows.len()
    );
    write_synthetic_inputs(&city, dir)?;
    println!("wrote synthetic city to {}", dir.display());
    println!("run it with: busvar run-all --config {}", dir.join("pipeline.toml").display());
    Ok(())
}

fn summarize(m: &Manifest, out_dir: &Path) -> std::io::Result<()> {
    let mut w = std::io::stdout().lock();
    for s in &m.stages {
        let dropped: Vec<String> = s.dropped.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(
            w,
            "{:<16} {:>10} {} in, {:>10} out  {}",
            s.stage,
            s.input,
            s.unit,
            s.output,
            dropped.join(" ")
        )?;
    }
    for model in &m.models {
        writeln!(
            w,
            "model {:<24} rows={:<5} trees={:<4} rmse={:.5} top={}",
            model.name,
            model.rows,
            model.trees,
            model.train_rmse,
            model.top_features.join(",")
        )?;
    }
    for s in &m.skipped {
        writeln!(w, "skipped: {s}")?;
    }
    writeln!(w, "{} artifacts written", m.artifacts.len() + 2)?;
    writeln!(w, "outputs in {}", out_dir.display())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }

    let Some(stage) = cli.verb.stage() else {
        return synth(cli.config.as_deref(), cli.out.as_deref());
    };
    let Some(path) = cli.config.as_deref() else {
        bail!("`{}` needs --config <path>", stage.as_str());
    };
    let mut config = PipelineConfig::from_file(path)?;
    if let Some(out) = cli.out {
        config.output.dir = out;
    }
    let manifest = run_pipeline(&config, stage)?;
    match summarize(&manifest, &config.output.dir) {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => Ok(()),
        other => other.context("writing the run summary"),
    }
}
