//! JSON run configuration shared by the CLI commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{OutcomeTransform, Schema};
use crate::error::{Error, Result};
use crate::mediation::MediationConfig;
use crate::rng::child_seed;
use crate::simulate::SimConfig;
use crate::study::StudyConfig;

/// Environment variable that overrides `threads`.
pub const THREADS_ENV: &str = "MEDFPCA_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub schema: Schema,
    pub outcome_transform: OutcomeTransform,
    /// Per-draw scalar traces of both chains.
    pub write_draws: bool,
    /// Per-draw latent trajectories on the basis grid (large).
    pub write_trajectories: bool,
    /// Subjects whose latent curves are imputed after a fit.
    pub impute_subjects: Vec<String>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            schema: Schema::with_covariates(&["x1".into(), "x2".into(), "x3".into()]),
            outcome_transform: OutcomeTransform::None,
            write_draws: true,
            write_trajectories: false,
            impute_subjects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub sim: SimConfig,
    pub fit: MediationConfig,
    pub study: StudyConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            output_dir: PathBuf::from("out"),
            sim: SimConfig::default(),
            fit: MediationConfig::default(),
            study: StudyConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        for (path, seed) in [
            ("sim.seed", self.sim.seed),
            ("fit.seed", self.fit.seed),
            ("fit.mediator.seed", self.fit.mediator.seed),
            ("fit.outcome.seed", self.fit.outcome.seed),
        ] {
            if seed != 0 {
                return Err(Error::config(
                    path,
                    "derived from the top-level seed; set `seed` instead",
                ));
            }
        }
        self.sim.validate("sim")?;
        self.fit.validate("fit")?;
        self.study.validate("study")?;
        Ok(())
    }

    /// Copy with the derived seeds filled in.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.sim.seed = child_seed(self.seed, "simulate", 0);
        cfg.fit.seed = child_seed(self.seed, "fit", 0);
        cfg
    }

    /// `MEDFPCA_THREADS` when set to a positive integer, else `threads`.
    pub fn effective_threads(&self) -> Result<usize> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::config(
                    THREADS_ENV,
                    format!("expected a positive integer, got {v:?}"),
                )),
            },
            Err(_) => Ok(self.threads),
        }
    }
}
