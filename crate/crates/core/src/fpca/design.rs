use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Response values and regressor rows for one FPCA run, aligned with the
/// subjects and time grids of a [`Dataset`].
#[derive(Debug, Clone)]
pub struct ResponseDesign {
    pub label: String,
    pub response: Vec<Vec<f64>>,
    /// `T_i x p` per subject.
    pub regressors: Vec<DMatrix<f64>>,
    pub regressor_names: Vec<String>,
}

impl ResponseDesign {
    /// Mediator model: `M_ij` on the covariates.
    pub fn mediator(ds: &Dataset) -> Self {
        ResponseDesign {
            label: "mediator".into(),
            response: ds.subjects.iter().map(|s| s.mediator.clone()).collect(),
            regressors: ds.subjects.iter().map(|s| s.covariates.clone()).collect(),
            regressor_names: ds.covariate_names.clone(),
        }
    }

    /// Outcome model: `Y_ij` on the covariates plus the concurrent mediator
    /// value supplied per subject and time point (last column, named
    /// `mediator`).
    pub fn outcome(ds: &Dataset, mediator_column: &[Vec<f64>]) -> Result<Self> {
        if mediator_column.len() != ds.n_subjects() {
            return Err(Error::Dimension {
                expected: ds.n_subjects(),
                got: mediator_column.len(),
            });
        }
        let mut regressors = Vec::with_capacity(ds.n_subjects());
        for (s, m) in ds.subjects.iter().zip(mediator_column) {
            if m.len() != s.n_obs() {
                return Err(Error::Dimension {
                    expected: s.n_obs(),
                    got: m.len(),
                });
            }
            let p = s.covariates.ncols();
            let x = DMatrix::from_fn(s.n_obs(), p + 1, |j, c| {
                if c < p {
                    s.covariates[(j, c)]
                } else {
                    m[j]
                }
            });
            regressors.push(x);
        }
        let mut names = ds.covariate_names.clone();
        names.push("mediator".into());
        Ok(ResponseDesign {
            label: "outcome".into(),
            response: ds.subjects.iter().map(|s| s.outcome.clone()).collect(),
            regressors,
            regressor_names: names,
        })
    }

    pub fn n_regressors(&self) -> usize {
        self.regressor_names.len()
    }
}
