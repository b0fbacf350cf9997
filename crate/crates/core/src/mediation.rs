//! Mediator and outcome fits, and the causal effect curves built from them.
//!
//! Effects per posterior draw `d`, on a grid over normalized time:
//!
//! ```text
//! ACME(t) = gamma * sum_r (chi_1r - chi_0r) psi_r(t)
//! TE(t)   = sum_s (xi_1s - xi_0s) eta_s(t) + ACME(t)
//! ANDE(t) = TE(t) - ACME(t)
//! ```
//!
//! The outcome chain is fitted after the mediator chain; its mediator column
//! is either the mediator posterior-mean fit or the raw observations.
//! Mediator and outcome draws are paired by index.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_time, validate, Dataset};
use crate::error::{Error, Result};
use crate::fpca::{
    ensure_enough_observations, run_chain_with_basis, select_truncation, FpcaConfig, FpcaDraws,
    ResponseDesign,
};
use crate::rng;
use crate::splines::{quantile_sorted, uniform_grid, SplineBasis};

pub const DEFAULT_EFFECT_GRID: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MediatorPlugin {
    /// Mediator posterior-mean fitted value at each observation.
    #[default]
    PosteriorMean,
    /// Raw observed mediator value.
    Observed,
}

/// Short pilot run with many components, used to pick the truncation level
/// by the explained-variance rule before the final chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotSettings {
    pub enabled: bool,
    pub max_components: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
}

impl Default for PilotSettings {
    fn default() -> Self {
        PilotSettings {
            enabled: true,
            max_components: 8,
            n_iter: 1000,
            n_burn: 500,
            thin: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MediationConfig {
    pub mediator: FpcaConfig,
    pub outcome: FpcaConfig,
    pub pilot: PilotSettings,
    pub mediator_plugin: MediatorPlugin,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for MediationConfig {
    fn default() -> Self {
        MediationConfig {
            mediator: FpcaConfig::default(),
            outcome: FpcaConfig::default(),
            pilot: PilotSettings::default(),
            mediator_plugin: MediatorPlugin::default(),
            grid_size: DEFAULT_EFFECT_GRID,
            seed: 0,
        }
    }
}

impl MediationConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        self.mediator.validate(&field("mediator"))?;
        self.outcome.validate(&field("outcome"))?;
        if self.mediator.n_retained() != self.outcome.n_retained() {
            return Err(Error::config(
                field("outcome.n_iter"),
                format!(
                    "retained draws {} differ from the mediator chain's {}",
                    self.outcome.n_retained(),
                    self.mediator.n_retained()
                ),
            ));
        }
        if self.pilot.enabled {
            if self.pilot.max_components == 0 {
                return Err(Error::config(
                    field("pilot.max_components"),
                    "must be at least 1",
                ));
            }
            if self.pilot.thin == 0 {
                return Err(Error::config(field("pilot.thin"), "must be at least 1"));
            }
            if self.pilot.n_iter <= self.pilot.n_burn {
                return Err(Error::config(
                    field("pilot.n_iter"),
                    "must exceed pilot.n_burn",
                ));
            }
        }
        if self.grid_size < 2 {
            return Err(Error::config(field("grid_size"), "must be at least 2"));
        }
        Ok(())
    }
}

/// Both chains plus the reporting grid, all on normalized time.
#[derive(Debug, Clone)]
pub struct MediationFit {
    pub mediator_draws: FpcaDraws,
    pub outcome_draws: FpcaDraws,
    pub grid: Vec<f64>,
    /// Original time units per normalized unit.
    pub time_scale: f64,
    pub config: MediationConfig,
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

fn fit_stage(
    ds: &Dataset,
    design: &ResponseDesign,
    basis: &SplineBasis,
    cfg: &FpcaConfig,
    pilot: &PilotSettings,
    seed: u64,
    stage: &str,
) -> Result<FpcaDraws> {
    let mut final_cfg = cfg.clone();
    if pilot.enabled {
        let pilot_cfg = FpcaConfig {
            n_components: pilot.max_components,
            n_iter: pilot.n_iter,
            n_burn: pilot.n_burn,
            thin: pilot.thin,
            ..cfg.clone()
        };
        let mut prng = rng::stream(seed, &format!("{stage}-pilot"), 0);
        let pilot_draws = run_chain_with_basis(ds, &pilot_cfg, design, basis.clone(), &mut prng)?;
        final_cfg.n_components = select_truncation(&pilot_draws, cfg.fev_threshold).max(1);
    }
    let mut crng = rng::stream(seed, stage, 0);
    let mut draws = run_chain_with_basis(ds, &final_cfg, design, basis.clone(), &mut crng)?;
    draws.config = final_cfg;
    Ok(draws)
}

/// Fits the mediator chain, then the outcome chain with the mediator column
/// chosen by `cfg.mediator_plugin`. Times are rescaled to `[0, 1]` first.
pub fn fit_mediation(ds: &Dataset, cfg: &MediationConfig) -> Result<MediationFit> {
    cfg.validate("")?;
    let report = validate(ds);
    if let Some(v) = report.violations.first() {
        return Err(Error::Stage {
            stage: "validation",
            source: Box::new(Error::Validation(v.to_string())),
        });
    }
    let (ds, time_scale) = staged("validation", normalize_time(ds))?;
    let p = ds.n_covariates();
    staged(
        "mediator",
        ensure_enough_observations(ds.total_obs(), cfg.mediator.basis.n_knots, p),
    )?;
    staged(
        "outcome",
        ensure_enough_observations(ds.total_obs(), cfg.outcome.basis.n_knots, p + 1),
    )?;
    let basis = staged(
        "mediator",
        SplineBasis::from_times(&ds.pooled_times(), cfg.mediator.basis),
    )?;

    let med_design = ResponseDesign::mediator(&ds);
    let mediator_draws = staged(
        "mediator",
        fit_stage(
            &ds,
            &med_design,
            &basis,
            &cfg.mediator,
            &cfg.pilot,
            cfg.seed,
            "mediator",
        ),
    )?;

    let column: Vec<Vec<f64>> = match cfg.mediator_plugin {
        MediatorPlugin::PosteriorMean => mediator_draws.fitted_mean.clone(),
        MediatorPlugin::Observed => ds.subjects.iter().map(|s| s.mediator.clone()).collect(),
    };
    let out_basis = if cfg.outcome.basis == cfg.mediator.basis {
        basis
    } else {
        staged(
            "outcome",
            SplineBasis::from_times(&ds.pooled_times(), cfg.outcome.basis),
        )?
    };
    let out_design = staged("outcome", ResponseDesign::outcome(&ds, &column))?;
    let outcome_draws = staged(
        "outcome",
        fit_stage(
            &ds,
            &out_design,
            &out_basis,
            &cfg.outcome,
            &cfg.pilot,
            cfg.seed,
            "outcome",
        ),
    )?;
    if outcome_draws.n_draws() != mediator_draws.n_draws() {
        return Err(Error::Stage {
            stage: "outcome",
            source: Box::new(Error::Dimension {
                expected: mediator_draws.n_draws(),
                got: outcome_draws.n_draws(),
            }),
        });
    }
    Ok(MediationFit {
        mediator_draws,
        outcome_draws,
        grid: uniform_grid(cfg.grid_size),
        time_scale,
        config: cfg.clone(),
    })
}

impl MediationFit {
    pub fn n_draws(&self) -> usize {
        self.mediator_draws
            .n_draws()
            .min(self.outcome_draws.n_draws())
    }

    /// Concurrent mediator coefficient `gamma` in draw `d`.
    pub fn gamma(&self, d: usize) -> f64 {
        let s = &self.outcome_draws.states[d];
        s.reg_coeffs[s.reg_coeffs.len() - 1]
    }

    fn contrast_curve(draws: &FpcaDraws, d: usize, grid_design: &DMatrix<f64>) -> DVector<f64> {
        let s = &draws.states[d];
        let contrast = &s.group_means[1] - &s.group_means[0];
        grid_design * (&s.basis_coeffs * contrast)
    }

    fn grid_designs(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let md = self.mediator_draws.basis.design_unchecked(&self.grid);
        let od = self.outcome_draws.basis.design_unchecked(&self.grid);
        (md, od)
    }

    fn acme_draws(&self, md: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..self.n_draws())
            .map(|d| {
                let c = Self::contrast_curve(&self.mediator_draws, d, md);
                (c * self.gamma(d)).iter().copied().collect()
            })
            .collect()
    }

    fn outcome_term_draws(&self, od: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..self.n_draws())
            .map(|d| {
                Self::contrast_curve(&self.outcome_draws, d, od)
                    .iter()
                    .copied()
                    .collect()
            })
            .collect()
    }
}

/// Summary band of a function on a grid across draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectCurve {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
    #[serde(skip)]
    pub integral_draws: Vec<f64>,
}

/// Mean and central 95% interval of a set of draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl IntervalSummary {
    pub fn from_draws(values: &[f64]) -> Self {
        if values.is_empty() {
            return IntervalSummary {
                mean: f64::NAN,
                lower: f64::NAN,
                upper: f64::NAN,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        // keep lower <= mean <= upper when rounding pushes them apart
        IntervalSummary {
            mean,
            lower: quantile_sorted(&sorted, 0.025).min(mean),
            upper: quantile_sorted(&sorted, 0.975).max(mean),
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Trapezoid rule on an arbitrary increasing grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
        .sum()
}

impl EffectCurve {
    pub fn from_draws(grid: Vec<f64>, draws: Vec<Vec<f64>>) -> Self {
        let k = grid.len();
        let mut mean = vec![0.0; k];
        let mut lower = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut column = Vec::with_capacity(draws.len());
        for g in 0..k {
            column.clear();
            column.extend(draws.iter().map(|d| d[g]));
            let s = IntervalSummary::from_draws(&column);
            mean[g] = s.mean;
            lower[g] = s.lower;
            upper[g] = s.upper;
        }
        let integral_draws = draws.iter().map(|d| trapezoid(&grid, d)).collect();
        EffectCurve {
            grid,
            mean,
            lower,
            upper,
            draws,
            integral_draws,
        }
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// Fraction of grid points where the band contains `truth(t)`.
    pub fn band_coverage(&self, truth: impl Fn(f64) -> f64) -> f64 {
        let hits = self
            .grid
            .iter()
            .enumerate()
            .filter(|&(g, &t)| {
                let v = truth(t);
                self.lower[g] <= v && v <= self.upper[g]
            })
            .count();
        hits as f64 / self.grid.len().max(1) as f64
    }

    /// CSV with columns `t, mean, lower, upper`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "mean", "lower", "upper"])?;
        for g in 0..self.grid.len() {
            w.write_record([
                self.grid[g].to_string(),
                self.mean[g].to_string(),
                self.lower[g].to_string(),
                self.upper[g].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn acme_curve(fit: &MediationFit) -> EffectCurve {
    let (md, _) = fit.grid_designs();
    EffectCurve::from_draws(fit.grid.clone(), fit.acme_draws(&md))
}

pub fn te_curve(fit: &MediationFit) -> EffectCurve {
    let (md, od) = fit.grid_designs();
    let mut draws = fit.outcome_term_draws(&od);
    for (t, a) in draws.iter_mut().zip(fit.acme_draws(&md)) {
        for (x, y) in t.iter_mut().zip(a) {
            *x += y;
        }
    }
    EffectCurve::from_draws(fit.grid.clone(), draws)
}

pub fn ande_curve(fit: &MediationFit) -> EffectCurve {
    let te = te_curve(fit);
    let acme = acme_curve(fit);
    ande_from(&te, &acme)
}

/// `te - acme` per draw and grid point.
pub fn ande_from(te: &EffectCurve, acme: &EffectCurve) -> EffectCurve {
    let draws = te
        .draws
        .iter()
        .zip(&acme.draws)
        .map(|(t, a)| t.iter().zip(a).map(|(x, y)| x - y).collect())
        .collect();
    EffectCurve::from_draws(te.grid.clone(), draws)
}

/// All three curves from one evaluation of the draws.
#[derive(Debug, Clone)]
pub struct EffectSet {
    pub te: EffectCurve,
    pub acme: EffectCurve,
    pub ande: EffectCurve,
}

pub fn effect_curves(fit: &MediationFit) -> EffectSet {
    let (md, od) = fit.grid_designs();
    let acme_draws = fit.acme_draws(&md);
    let mut te_draws = fit.outcome_term_draws(&od);
    for (t, a) in te_draws.iter_mut().zip(&acme_draws) {
        for (x, y) in t.iter_mut().zip(a) {
            *x += y;
        }
    }
    let te = EffectCurve::from_draws(fit.grid.clone(), te_draws);
    let acme = EffectCurve::from_draws(fit.grid.clone(), acme_draws);
    let ande = ande_from(&te, &acme);
    EffectSet { te, acme, ande }
}

/// Per-draw trapezoid integral over `[0, 1]`, summarized.
pub fn integrate_effect(curve: &EffectCurve) -> Result<IntervalSummary> {
    let g = &curve.grid;
    let covers = g.len() >= 2
        && g[0].abs() <= 1e-12
        && (g[g.len() - 1] - 1.0).abs() <= 1e-12
        && g.windows(2).all(|w| w[1] > w[0]);
    if !covers {
        return Err(Error::Domain(
            "effect grid must be increasing from 0 to 1".into(),
        ));
    }
    let integrals: Vec<f64> = curve.draws.iter().map(|d| trapezoid(g, d)).collect();
    Ok(IntervalSummary::from_draws(&integrals))
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputedCurve {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Pointwise posterior standard deviation.
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputedSubject {
    pub id: String,
    pub grid: Vec<f64>,
    pub mediator: ImputedCurve,
    pub outcome: ImputedCurve,
}

fn impute_one(draws: &FpcaDraws, i: usize, design: &DMatrix<f64>) -> ImputedCurve {
    let n = draws.n_draws();
    let curves: Vec<DVector<f64>> = (0..n).map(|d| draws.trajectory(d, i, design)).collect();
    let k = design.nrows();
    let mut out = ImputedCurve {
        mean: vec![0.0; k],
        lower: vec![0.0; k],
        upper: vec![0.0; k],
        sd: vec![0.0; k],
    };
    let mut column = Vec::with_capacity(n);
    for g in 0..k {
        column.clear();
        column.extend(curves.iter().map(|c| c[g]));
        let s = IntervalSummary::from_draws(&column);
        let var = column.iter().map(|v| (v - s.mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        out.mean[g] = s.mean;
        out.lower[g] = s.lower;
        out.upper[g] = s.upper;
        out.sd[g] = var.sqrt();
    }
    out
}

/// Posterior mean and 95% band of each requested subject's latent mediator
/// and outcome curves on the reporting grid.
pub fn impute_trajectories(
    fit: &MediationFit,
    subject_ids: &[String],
) -> Result<Vec<ImputedSubject>> {
    let (md, od) = fit.grid_designs();
    subject_ids
        .iter()
        .map(|id| {
            let im = fit.mediator_draws.subject_index(id)?;
            let io = fit.outcome_draws.subject_index(id)?;
            Ok(ImputedSubject {
                id: id.clone(),
                grid: fit.grid.clone(),
                mediator: impute_one(&fit.mediator_draws, im, &md),
                outcome: impute_one(&fit.outcome_draws, io, &od),
            })
        })
        .collect()
}

/// JSON summary of one mediation analysis.
#[derive(Debug, Clone, Serialize)]
pub struct EffectsSummary {
    pub te: IntervalSummary,
    pub acme: IntervalSummary,
    pub ande: IntervalSummary,
    pub gamma: IntervalSummary,
    pub n_draws: usize,
    pub mediator_components: usize,
    pub outcome_components: usize,
    pub time_scale: f64,
    pub seed: u64,
    pub warnings: Vec<String>,
    pub config: MediationConfig,
}

pub fn summarize(fit: &MediationFit, effects: &EffectSet) -> Result<EffectsSummary> {
    let gammas: Vec<f64> = (0..fit.n_draws()).map(|d| fit.gamma(d)).collect();
    let mut warnings = fit.mediator_draws.warnings.clone();
    warnings.extend(fit.outcome_draws.warnings.iter().cloned());
    Ok(EffectsSummary {
        te: integrate_effect(&effects.te)?,
        acme: integrate_effect(&effects.acme)?,
        ande: integrate_effect(&effects.ande)?,
        gamma: IntervalSummary::from_draws(&gammas),
        n_draws: fit.n_draws(),
        mediator_components: fit.mediator_draws.n_components(),
        outcome_components: fit.outcome_draws.n_components(),
        time_scale: fit.time_scale,
        seed: fit.config.seed,
        warnings,
        config: fit.config.clone(),
    })
}
