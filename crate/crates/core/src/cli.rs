//! Command-line commands: `simulate`, `fit`, `replicate` and `report`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{load_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::fpca::{diagnostics, ChainReport};
use crate::mediation::{effect_curves, fit_mediation, impute_trajectories, summarize};
use crate::simulate::generate_dataset;
use crate::study::{format_table, read_report_csv, report_rows, run_study, write_report_csv};

#[derive(Debug, Parser)]
#[command(
    name = "medfpca",
    version,
    about = "Functional mediation analysis for sparse longitudinal data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its truth sidecar.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fit the mediator and outcome models and write effect curves.
    Fit {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a replicated simulation study.
    Replicate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print a report CSV as an aligned table.
    Report {
        #[arg(short, long)]
        input: PathBuf,
    },
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    threads: usize,
    started: DateTime<Utc>,
    finished: DateTime<Utc>,
    wall_seconds: f64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    config: &'a RunConfig,
}

struct Run {
    cfg: RunConfig,
    threads: usize,
    out_dir: PathBuf,
    started: DateTime<Utc>,
    clock: Instant,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl Run {
    fn start(config: &Path, output: Option<PathBuf>) -> Result<Self> {
        let cfg = RunConfig::load(config)?.resolved();
        let threads = cfg.effective_threads()?;
        let out_dir = output.unwrap_or_else(|| cfg.output_dir.clone());
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Run {
            cfg,
            threads,
            out_dir,
            started: Utc::now(),
            clock: Instant::now(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out_dir.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        use std::io::Write;
        w.write_all(b"\n")
            .map_err(|e| Error::io(self.out_dir.join(name), e))?;
        Ok(())
    }

    fn finish(mut self, command: &'static str, inputs: Vec<PathBuf>) -> Result<()> {
        let finished = Utc::now();
        let cfg = self.cfg.clone();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            threads: self.threads,
            started: self.started,
            finished,
            wall_seconds: self.clock.elapsed().as_secs_f64(),
            inputs,
            outputs: self.outputs.clone(),
            warnings: self.warnings.clone(),
            config: &cfg,
        };
        self.write_json("manifest.json", &manifest)?;
        for w in &self.warnings {
            eprintln!("warning: {w}");
        }
        Ok(())
    }
}

fn cmd_simulate(config: &Path, output: Option<PathBuf>) -> Result<()> {
    let mut run = Run::start(config, output)?;
    let (ds, truth) = generate_dataset(&run.cfg.sim)?;
    let path = run.out_dir.join("dataset.csv");
    write_dataset(&ds, &path)?;
    run.outputs.push(path);
    run.write_json("truth.json", &truth)?;
    eprintln!(
        "simulated {} subjects, {} observations",
        ds.n_subjects(),
        ds.total_obs()
    );
    run.finish("simulate", vec![config.to_path_buf()])
}

#[derive(Serialize)]
struct DiagnosticsFile {
    mediator: ChainReport,
    outcome: ChainReport,
}

fn cmd_fit(config: &Path, data: &Path, output: Option<PathBuf>) -> Result<()> {
    let mut run = Run::start(config, output)?;
    let ds = load_dataset(data, &run.cfg.io.schema, run.cfg.io.outcome_transform)?;
    eprintln!("fitting {} subjects", ds.n_subjects());
    let fit = fit_mediation(&ds, &run.cfg.fit)?;
    let effects = effect_curves(&fit);
    for (name, curve) in [
        ("te.csv", &effects.te),
        ("acme.csv", &effects.acme),
        ("ande.csv", &effects.ande),
    ] {
        let w = run.create(name)?;
        curve.write_csv(w)?;
    }
    let summary = summarize(&fit, &effects)?;
    run.warnings.extend(summary.warnings.iter().cloned());
    run.write_json("effects.json", &summary)?;

    let diag = DiagnosticsFile {
        mediator: diagnostics(&fit.mediator_draws),
        outcome: diagnostics(&fit.outcome_draws),
    };
    for report in [&diag.mediator, &diag.outcome] {
        let flagged: Vec<&str> = report
            .scalars
            .iter()
            .filter(|s| s.flagged)
            .map(|s| s.name.as_str())
            .collect();
        if !flagged.is_empty() {
            run.warnings.push(format!(
                "{} chain: split PSRF above {} for {}",
                report.label,
                crate::fpca::PSRF_FLAG,
                flagged.join(", ")
            ));
        }
    }
    run.write_json("diagnostics.json", &diag)?;

    if run.cfg.io.write_draws {
        for draws in [&fit.mediator_draws, &fit.outcome_draws] {
            let w = run.create(&format!("{}_draws.csv", draws.label))?;
            draws.write_scalar_csv(w)?;
        }
    }
    if run.cfg.io.write_trajectories {
        for draws in [&fit.mediator_draws, &fit.outcome_draws] {
            let w = run.create(&format!("{}_trajectories.csv", draws.label))?;
            draws.write_trajectory_csv(w, &fit.grid)?;
        }
    }
    if !run.cfg.io.impute_subjects.is_empty() {
        let imputed = impute_trajectories(&fit, &run.cfg.io.impute_subjects)?;
        run.write_json("imputed.json", &imputed)?;
    }
    eprintln!(
        "te {:.4} [{:.4}, {:.4}], acme {:.4} [{:.4}, {:.4}]",
        summary.te.mean,
        summary.te.lower,
        summary.te.upper,
        summary.acme.mean,
        summary.acme.lower,
        summary.acme.upper
    );
    run.finish("fit", vec![config.to_path_buf(), data.to_path_buf()])
}

fn cmd_replicate(config: &Path, output: Option<PathBuf>) -> Result<()> {
    let mut run = Run::start(config, output)?;
    if run.cfg.study.full_scale {
        run.warnings.push(
            "full-scale study: 1000 replicates per sparsity level, expect a long runtime".into(),
        );
        eprintln!("warning: full-scale study requested");
    }
    let cfg = run.cfg.clone();
    let reports = run_study(&cfg.sim, &cfg.fit, &cfg.study, cfg.seed, run.threads)?;
    let rows = report_rows(&reports);
    let w = run.create("report.csv")?;
    write_report_csv(&rows, w)?;
    let table = format_table(&rows);
    {
        use std::io::Write;
        let mut w = run.create("report.txt")?;
        w.write_all(table.as_bytes())
            .map_err(|e| Error::io(run.out_dir.join("report.txt"), e))?;
    }
    run.write_json(
        "replicates.json",
        &reports.iter().map(|r| &r.records).collect::<Vec<_>>(),
    )?;
    print!("{table}");
    let invalid = reports.iter().find_map(|r| r.ensure_valid().err());
    if let Some(e) = &invalid {
        run.warnings.push(e.to_string());
    }
    run.finish("replicate", vec![config.to_path_buf()])?;
    match invalid {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_report(input: &Path) -> Result<()> {
    let f = File::open(input).map_err(|e| Error::io(input, e))?;
    let rows = read_report_csv(f)?;
    print!("{}", format_table(&rows));
    Ok(())
}

/// Runs a parsed command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, output } => cmd_simulate(&config, output),
        Command::Fit {
            config,
            data,
            output,
        } => cmd_fit(&config, &data, output),
        Command::Replicate { config, output } => cmd_replicate(&config, output),
        Command::Report { input } => cmd_report(&input),
    }
}
