//! Replicated simulation studies comparing MFPCA with the GEE baseline on
//! the integrated total and mediated effects.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gee::{gee_mediation, GeeOptions};
use crate::mediation::{effect_curves, fit_mediation, integrate_effect, MediationConfig};
use crate::rng::child_seed;
use crate::simulate::{generate_dataset, SimConfig, ACME_INTEGRAL, TE_INTEGRAL};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mfpca,
    Gee,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Mfpca => "MFPCA",
            Method::Gee => "GEE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Te,
    Acme,
}

impl Estimand {
    pub const ALL: [Estimand; 2] = [Estimand::Te, Estimand::Acme];

    pub fn label(self) -> &'static str {
        match self {
            Estimand::Te => "te",
            Estimand::Acme => "acme",
        }
    }

    pub fn truth(self) -> f64 {
        match self {
            Estimand::Te => TE_INTEGRAL,
            Estimand::Acme => ACME_INTEGRAL,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "te" => Some(Estimand::Te),
            "acme" => Some(Estimand::Acme),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub n_reps: usize,
    /// 1000 replicates regardless of `n_reps`.
    pub full_scale: bool,
    pub methods: Vec<Method>,
    /// Mean numbers of observations per subject; empty means the
    /// simulation config's own value.
    pub sparsity_levels: Vec<f64>,
    /// Chain length and burn-in applied to both MFPCA chains.
    pub chain_iter: usize,
    pub chain_burn: usize,
    pub gee: GeeOptions,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_reps: 100,
            full_scale: false,
            methods: vec![Method::Mfpca, Method::Gee],
            sparsity_levels: Vec::new(),
            chain_iter: 2000,
            chain_burn: 1000,
            gee: GeeOptions::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        if self.n_reps == 0 {
            return Err(Error::config(field("n_reps"), "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config(
                field("methods"),
                "must name at least one method",
            ));
        }
        if self.chain_iter <= self.chain_burn {
            return Err(Error::config(field("chain_iter"), "must exceed chain_burn"));
        }
        if let Some(t) = self.sparsity_levels.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::config(
                field("sparsity_levels"),
                format!("{t} is not positive"),
            ));
        }
        self.gee.validate(&field("gee"))
    }

    pub fn effective_reps(&self) -> usize {
        if self.full_scale {
            1000
        } else {
            self.n_reps
        }
    }

    /// Mediation config with the study's chain length applied.
    pub fn chain_config(&self, base: &MediationConfig) -> MediationConfig {
        let mut cfg = base.clone();
        for c in [&mut cfg.mediator, &mut cfg.outcome] {
            c.n_iter = self.chain_iter;
            c.n_burn = self.chain_burn;
        }
        cfg
    }
}

/// One integrated estimate with its 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub method: Method,
    pub data_seed: u64,
    /// `(te, acme)` on success, otherwise the error message.
    pub te: Option<Estimate>,
    pub acme: Option<Estimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub abs_bias: f64,
    pub rmse: f64,
    pub coverage: f64,
}

/// `|mean error|`, root mean squared error and interval coverage.
pub fn compute_metrics(estimates: &[Estimate], truth: f64) -> Metrics {
    let n = estimates.len() as f64;
    if estimates.is_empty() {
        return Metrics {
            abs_bias: f64::NAN,
            rmse: f64::NAN,
            coverage: f64::NAN,
        };
    }
    let bias = estimates.iter().map(|e| e.value - truth).sum::<f64>() / n;
    let mse = estimates
        .iter()
        .map(|e| (e.value - truth).powi(2))
        .sum::<f64>()
        / n;
    let hits = estimates
        .iter()
        .filter(|e| e.lower <= truth && truth <= e.upper)
        .count();
    Metrics {
        abs_bias: bias.abs(),
        rmse: mse.sqrt(),
        coverage: hits as f64 / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub estimand: String,
    pub sparsity_t: f64,
    pub n_reps: usize,
    pub abs_bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationReport {
    pub sparsity_t: f64,
    pub n_reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub records: Vec<ReplicateRecord>,
    pub sim: SimConfig,
    pub fit: MediationConfig,
    pub study: StudyConfig,
}

impl ReplicationReport {
    pub fn n_failed(&self, method: Method) -> usize {
        self.records
            .iter()
            .filter(|r| r.method == method && r.error.is_some())
            .count()
    }

    pub fn estimates(&self, method: Method, estimand: Estimand) -> Vec<Estimate> {
        self.records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| match estimand {
                Estimand::Te => r.te,
                Estimand::Acme => r.acme,
            })
            .collect()
    }

    pub fn metrics(&self, method: Method, estimand: Estimand) -> Metrics {
        compute_metrics(&self.estimates(method, estimand), estimand.truth())
    }

    pub fn is_valid(&self) -> bool {
        self.methods
            .iter()
            .all(|&m| self.n_failed(m) as f64 <= MAX_FAILURE_FRACTION * self.n_reps as f64)
    }

    /// Errors with the worst method's failure count when too many replicates
    /// failed.
    pub fn ensure_valid(&self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let failed = self
            .methods
            .iter()
            .map(|&m| self.n_failed(m))
            .max()
            .unwrap_or(0);
        Err(Error::ReplicationInvalid {
            failed,
            n_reps: self.n_reps,
        })
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for &method in &self.methods {
            for estimand in Estimand::ALL {
                let m = self.metrics(method, estimand);
                rows.push(ReportRow {
                    method: method.label().to_string(),
                    estimand: estimand.label().to_string(),
                    sparsity_t: self.sparsity_t,
                    n_reps: self.n_reps,
                    abs_bias: m.abs_bias,
                    rmse: m.rmse,
                    coverage: m.coverage,
                    n_failed: self.n_failed(method),
                });
            }
        }
        rows
    }
}

fn mfpca_replicate(
    ds: &crate::data::Dataset,
    cfg: &MediationConfig,
) -> Result<(Estimate, Estimate)> {
    let fit = fit_mediation(ds, cfg)?;
    let effects = effect_curves(&fit);
    let te = integrate_effect(&effects.te)?;
    let acme = integrate_effect(&effects.acme)?;
    Ok((
        Estimate {
            value: te.mean,
            lower: te.lower,
            upper: te.upper,
        },
        Estimate {
            value: acme.mean,
            lower: acme.lower,
            upper: acme.upper,
        },
    ))
}

fn gee_replicate(ds: &crate::data::Dataset, opts: &GeeOptions) -> Result<(Estimate, Estimate)> {
    let g = gee_mediation(ds, opts)?;
    let conv = |w: crate::gee::WaldEstimate| Estimate {
        value: w.estimate,
        lower: w.lower,
        upper: w.upper,
    };
    Ok((conv(g.te), conv(g.acme)))
}

fn run_one(
    rep: usize,
    sim: &SimConfig,
    fit: &MediationConfig,
    study: &StudyConfig,
    seed: u64,
) -> Vec<ReplicateRecord> {
    let tag = format!("T={}", sim.mean_obs);
    let data_seed = child_seed(seed, &format!("replicate-data {tag}"), rep as u64);
    let sim_cfg = SimConfig {
        seed: data_seed,
        ..sim.clone()
    };
    let fit_cfg = MediationConfig {
        seed: child_seed(seed, &format!("replicate-fit {tag}"), rep as u64),
        ..fit.clone()
    };
    let data = generate_dataset(&sim_cfg);
    study
        .methods
        .iter()
        .map(|&method| {
            let result = data
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|(ds, _)| {
                    match method {
                        Method::Mfpca => mfpca_replicate(ds, &fit_cfg),
                        Method::Gee => gee_replicate(ds, &study.gee),
                    }
                    .map_err(|e| e.to_string())
                });
            let (te, acme, error) = match result {
                Ok((te, acme)) => (Some(te), Some(acme), None),
                Err(e) => (None, None, Some(e)),
            };
            ReplicateRecord {
                rep,
                method,
                data_seed,
                te,
                acme,
                error,
            }
        })
        .collect()
}

/// Runs `n_reps` replicates at one sparsity level on a pool of
/// `parallelism` threads. Results do not depend on the thread count.
pub fn run_replication(
    sim: &SimConfig,
    fit: &MediationConfig,
    study: &StudyConfig,
    seed: u64,
    parallelism: usize,
) -> Result<ReplicationReport> {
    sim.validate("sim")?;
    study.validate("study")?;
    let fit = study.chain_config(fit);
    fit.validate("fit")?;
    let n_reps = study.effective_reps();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    let records: Vec<ReplicateRecord> = pool.install(|| {
        (0..n_reps)
            .into_par_iter()
            .flat_map_iter(|rep| run_one(rep, sim, &fit, study, seed))
            .collect()
    });
    Ok(ReplicationReport {
        sparsity_t: sim.mean_obs,
        n_reps,
        seed,
        methods: study.methods.clone(),
        records,
        sim: sim.clone(),
        fit,
        study: study.clone(),
    })
}

/// One report per sparsity level, in the configured order.
pub fn run_study(
    sim: &SimConfig,
    fit: &MediationConfig,
    study: &StudyConfig,
    seed: u64,
    parallelism: usize,
) -> Result<Vec<ReplicationReport>> {
    let levels = if study.sparsity_levels.is_empty() {
        vec![sim.mean_obs]
    } else {
        study.sparsity_levels.clone()
    };
    levels
        .iter()
        .map(|&t| {
            let sim_t = SimConfig {
                mean_obs: t,
                ..sim.clone()
            };
            run_replication(&sim_t, fit, study, seed, parallelism)
        })
        .collect()
}

pub fn report_rows(reports: &[ReplicationReport]) -> Vec<ReportRow> {
    reports.iter().flat_map(|r| r.rows()).collect()
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "method",
    "estimand",
    "sparsity_T",
    "n_reps",
    "abs_bias",
    "rmse",
    "coverage",
    "n_failed",
];

pub fn write_report_csv<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.estimand.clone(),
            r.sparsity_t.to_string(),
            r.n_reps.to_string(),
            r.abs_bias.to_string(),
            r.rmse.to_string(),
            r.coverage.to_string(),
            r.n_failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report csv>", e))?;
    Ok(())
}

pub fn read_report_csv<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx: Vec<usize> = REPORT_COLUMNS
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Row {
            row: k + 1,
            message: format!("cannot parse {what}"),
        };
        let num = |c: usize, what: &str| rec[idx[c]].trim().parse::<f64>().map_err(|_| bad(what));
        let int = |c: usize, what: &str| rec[idx[c]].trim().parse::<usize>().map_err(|_| bad(what));
        let estimand = rec[idx[1]].to_string();
        if Estimand::parse(&estimand).is_none() {
            return Err(bad("estimand"));
        }
        rows.push(ReportRow {
            method: rec[idx[0]].to_string(),
            estimand,
            sparsity_t: num(2, "sparsity_T")?,
            n_reps: int(3, "n_reps")?,
            abs_bias: num(4, "abs_bias")?,
            rmse: num(5, "rmse")?,
            coverage: num(6, "coverage")?,
            n_failed: int(7, "n_failed")?,
        });
    }
    Ok(rows)
}

/// Aligned text table: one section per sparsity level (in row order), one
/// line per method with TE and ACME bias, RMSE and coverage.
pub fn format_table(rows: &[ReportRow]) -> String {
    let mut levels: Vec<f64> = Vec::new();
    for r in rows {
        if !levels.contains(&r.sparsity_t) {
            levels.push(r.sparsity_t);
        }
    }
    let mut out = String::new();
    let header = format!(
        "{:<8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7}",
        "method",
        "te_bias",
        "te_rmse",
        "te_cov",
        "acme_bias",
        "acme_rmse",
        "acme_cov",
        "n_reps",
        "failed"
    );
    for t in levels {
        let _ = writeln!(out, "T = {t}");
        let _ = writeln!(out, "{header}");
        let mut methods: Vec<&str> = Vec::new();
        for r in rows.iter().filter(|r| r.sparsity_t == t) {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        for m in methods {
            let find = |e: &str| {
                rows.iter()
                    .find(|r| r.sparsity_t == t && r.method == m && r.estimand == e)
            };
            let cells = |r: Option<&ReportRow>| match r {
                Some(r) => format!("{:>9.3} {:>9.3} {:>9.3}", r.abs_bias, r.rmse, r.coverage),
                None => format!("{:>9} {:>9} {:>9}", "-", "-", "-"),
            };
            let te = find("te");
            let acme = find("acme");
            let base = te.or(acme).expect("row exists");
            let _ = writeln!(
                out,
                "{:<8} {} {} {:>7} {:>7}",
                m,
                cells(te),
                cells(acme),
                base.n_reps,
                base.n_failed
            );
        }
        out.push('\n');
    }
    out
}
