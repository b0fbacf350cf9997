use serde::Serialize;

use super::FpcaDraws;

pub const PSRF_FLAG: f64 = 1.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarDiagnostic {
    pub name: String,
    pub ess: f64,
    /// Split-chain potential scale reduction factor.
    pub psrf: f64,
    /// Zero variance trace; `ess` and `psrf` are not meaningful.
    pub degenerate: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReport {
    pub label: String,
    pub n_draws: usize,
    pub scalars: Vec<ScalarDiagnostic>,
    pub any_flagged: bool,
    pub any_degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Effective sample size with Geyer's initial monotone sequence estimator.
/// Returns `None` for traces with zero variance or fewer than 4 values.
pub fn effective_sample_size(x: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 4 {
        return None;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let gamma0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(gamma0 > 1e-300) {
        return None;
    }
    let autocov = |lag: usize| -> f64 {
        centered[..n - lag]
            .iter()
            .zip(&centered[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = autocov(lag) + autocov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum_pairs += pair;
        prev = pair;
        lag += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs / gamma0).max(1.0 / (n as f64).ln().max(1.0));
    Some((n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0)))
}

/// Potential scale reduction of the two halves of one trace.
pub fn split_psrf(x: &[f64]) -> Option<f64> {
    let half = x.len() / 2;
    if half < 2 {
        return None;
    }
    let first = &x[..half];
    let second = &x[x.len() - half..];
    let (m1, v1) = mean_var(first);
    let (m2, v2) = mean_var(second);
    let w = (v1 + v2) / 2.0;
    if !(w > 1e-300) {
        return None;
    }
    let n = half as f64;
    let grand = (m1 + m2) / 2.0;
    let b = n * ((m1 - grand).powi(2) + (m2 - grand).powi(2));
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

pub fn diagnostics_from_traces(label: &str, traces: &[(String, Vec<f64>)]) -> ChainReport {
    let scalars: Vec<ScalarDiagnostic> = traces
        .iter()
        .map(|(name, x)| {
            let ess = effective_sample_size(x);
            let psrf = split_psrf(x);
            let degenerate = ess.is_none() || psrf.is_none();
            let psrf = psrf.unwrap_or(f64::NAN);
            ScalarDiagnostic {
                name: name.clone(),
                ess: ess.unwrap_or(0.0),
                psrf,
                degenerate,
                flagged: psrf > PSRF_FLAG,
            }
        })
        .collect();
    ChainReport {
        label: label.to_string(),
        n_draws: traces.first().map(|(_, x)| x.len()).unwrap_or(0),
        any_flagged: scalars.iter().any(|s| s.flagged),
        any_degenerate: scalars.iter().any(|s| s.degenerate),
        scalars,
    }
}

/// ESS and split PSRF for every named scalar of a chain.
pub fn diagnostics(draws: &FpcaDraws) -> ChainReport {
    diagnostics_from_traces(&draws.label, &draws.scalar_traces())
}
