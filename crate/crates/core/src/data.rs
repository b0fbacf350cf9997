//! Sparse irregular longitudinal data: per-subject series, long-format CSV
//! ingestion and export, validation and time normalization.
//!
//! A CSV row is one observation `(id, treatment, time, mediator, outcome,
//! covariates...)`. Rows are grouped by id and sorted by time; the mediator,
//! outcome and covariate values of a subject are permuted together with its
//! times.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit: treatment arm, irregular time grid and the aligned
/// observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub id: String,
    /// Treatment indicator, 0 or 1.
    pub z: u8,
    pub times: Vec<f64>,
    pub mediator: Vec<f64>,
    pub outcome: Vec<f64>,
    /// One row per time stamp.
    pub covariates: DMatrix<f64>,
}

impl SubjectSeries {
    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    /// Column means of the covariate rows.
    pub fn mean_covariates(&self) -> Vec<f64> {
        let n = self.n_obs().max(1) as f64;
        (0..self.covariates.ncols())
            .map(|c| self.covariates.column(c).sum() / n)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectSeries>,
    pub covariate_names: Vec<String>,
    /// `(0, T_max)`.
    pub time_range: (f64, f64),
}

impl Dataset {
    /// Builds a dataset with `time_range` set to `(0, max observed time)`.
    pub fn new(subjects: Vec<SubjectSeries>, covariate_names: Vec<String>) -> Self {
        let t_max = subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .fold(0.0_f64, f64::max);
        Dataset {
            subjects,
            covariate_names,
            time_range: (0.0, t_max),
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    pub fn subject(&self, id: &str) -> Option<(usize, &SubjectSeries)> {
        self.subjects.iter().enumerate().find(|(_, s)| s.id == id)
    }

    pub fn arm_counts(&self) -> [usize; 2] {
        let mut counts = [0, 0];
        for s in &self.subjects {
            if s.z <= 1 {
                counts[s.z as usize] += 1;
            }
        }
        counts
    }

    /// Every observation time, all subjects pooled.
    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }

    /// Returns `Err` with the first violation when [`validate`] reports any.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        match report.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::Validation(v.to_string())),
        }
    }
}

/// Column-name mapping for the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub id: String,
    pub treatment: String,
    pub time: String,
    pub mediator: String,
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            id: "id".into(),
            treatment: "treatment".into(),
            time: "time".into(),
            mediator: "mediator".into(),
            outcome: "outcome".into(),
            covariates: Vec::new(),
        }
    }
}

impl Schema {
    pub fn with_covariates(names: &[String]) -> Self {
        Schema {
            covariates: names.to_vec(),
            ..Schema::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeTransform {
    #[default]
    None,
    Log,
}

struct Row {
    z: u8,
    time: f64,
    mediator: f64,
    outcome: f64,
    covariates: Vec<f64>,
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(Error::Row {
            row,
            message: format!("blank value in column \"{column}\""),
        });
    }
    let value: f64 = trimmed.parse().map_err(|_| Error::Row {
        row,
        message: format!("unparseable value {trimmed:?} in column \"{column}\""),
    })?;
    if !value.is_finite() {
        return Err(Error::Row {
            row,
            message: format!("non-finite value in column \"{column}\""),
        });
    }
    Ok(value)
}

/// Reads a long-format CSV. Row indices in errors are 1-based data rows
/// (the header is not counted).
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: &Schema,
    transform: OutcomeTransform,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema, transform)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    schema: &Schema,
    transform: OutcomeTransform,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = column(&schema.id)?;
    let z_col = column(&schema.treatment)?;
    let t_col = column(&schema.time)?;
    let m_col = column(&schema.mediator)?;
    let y_col = column(&schema.outcome)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    // BTreeMap keeps subjects in id order, independent of row order.
    let mut grouped: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let id = field(id_col).trim().to_string();
        if id.is_empty() {
            return Err(Error::Row {
                row,
                message: "blank subject id".into(),
            });
        }
        let z = parse_cell(field(z_col), row, &schema.treatment)?;
        if z != 0.0 && z != 1.0 {
            return Err(Error::Row {
                row,
                message: format!("treatment must be 0 or 1, got {z}"),
            });
        }
        let time = parse_cell(field(t_col), row, &schema.time)?;
        let mediator = parse_cell(field(m_col), row, &schema.mediator)?;
        let mut outcome = parse_cell(field(y_col), row, &schema.outcome)?;
        if transform == OutcomeTransform::Log {
            if outcome <= 0.0 {
                return Err(Error::Row {
                    row,
                    message: format!("outcome {outcome} is not positive under log transform"),
                });
            }
            outcome = outcome.ln();
        }
        let covariates = x_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_cell(field(c), row, name))
            .collect::<Result<Vec<_>>>()?;
        let entry = grouped.entry(id.clone()).or_default();
        if let Some(first) = entry.first() {
            if first.z != z as u8 {
                return Err(Error::Row {
                    row,
                    message: format!("treatment changes within subject \"{id}\""),
                });
            }
        }
        entry.push(Row {
            z: z as u8,
            time,
            mediator,
            outcome,
            covariates,
        });
    }

    let p = schema.covariates.len();
    let mut subjects = Vec::with_capacity(grouped.len());
    for (id, mut rows) in grouped {
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(w) = rows.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(Error::Validation(format!(
                "subject \"{id}\": duplicate time stamp {}",
                w[0].time
            )));
        }
        let n = rows.len();
        let covariates = DMatrix::from_fn(n, p, |j, c| rows[j].covariates[c]);
        subjects.push(SubjectSeries {
            z: rows[0].z,
            times: rows.iter().map(|r| r.time).collect(),
            mediator: rows.iter().map(|r| r.mediator).collect(),
            outcome: rows.iter().map(|r| r.outcome).collect(),
            covariates,
            id,
        });
    }
    let ds = Dataset::new(subjects, schema.covariates.clone());
    if let Some(v) = validate(&ds)
        .violations
        .into_iter()
        .find(|v| v.kind != ViolationKind::ArmEmpty)
    {
        return Err(Error::Validation(v.to_string()));
    }
    Ok(ds)
}

/// Writes the dataset in long format using the default column names.
/// Floats use the shortest round-trip representation.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(ds, file)
}

pub fn write_dataset_to<W: std::io::Write>(ds: &Dataset, writer: W) -> Result<()> {
    let schema = Schema::with_covariates(&ds.covariate_names);
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.id.clone(),
        schema.treatment.clone(),
        schema.time.clone(),
        schema.mediator.clone(),
        schema.outcome.clone(),
    ];
    header.extend(schema.covariates.iter().cloned());
    wtr.write_record(&header)?;
    for s in &ds.subjects {
        for j in 0..s.n_obs() {
            let mut rec = vec![
                s.id.clone(),
                s.z.to_string(),
                s.times[j].to_string(),
                s.mediator[j].to_string(),
                s.outcome[j].to_string(),
            ];
            rec.extend((0..s.covariates.ncols()).map(|c| s.covariates[(j, c)].to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Divides all times by `T_max` and returns the scale used. A dataset
/// already on `[0, 1]` comes back unchanged with scale 1.
pub fn normalize_time(ds: &Dataset) -> Result<(Dataset, f64)> {
    let t_max = ds.time_range.1;
    if ds.subjects.is_empty() || ds.total_obs() == 0 {
        return Err(Error::DegenerateRange("dataset has no observations".into()));
    }
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::DegenerateRange(format!("T_max = {t_max}")));
    }
    let mut out = ds.clone();
    if t_max != 1.0 {
        for s in &mut out.subjects {
            for t in &mut s.times {
                *t /= t_max;
            }
        }
    }
    out.time_range = (0.0, 1.0);
    Ok((out, t_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NoObservations,
    NonIncreasingTimes,
    NonFinite,
    LengthMismatch,
    BadTreatment,
    TimeOutOfRange,
    CovariateWidth,
    ArmEmpty,
}

impl ViolationKind {
    fn label(self) -> &'static str {
        match self {
            ViolationKind::NoObservations => "no observations",
            ViolationKind::NonIncreasingTimes => "non-increasing times",
            ViolationKind::NonFinite => "non-finite value",
            ViolationKind::LengthMismatch => "length mismatch",
            ViolationKind::BadTreatment => "treatment not in {0, 1}",
            ViolationKind::TimeOutOfRange => "time outside time range",
            ViolationKind::CovariateWidth => "covariate column count mismatch",
            ViolationKind::ArmEmpty => "treatment arm empty",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject: Option<String>,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Some(id) => write!(f, "{} (subject \"{id}\")", self.kind.label())?,
            None => write!(f, "{}", self.kind.label())?,
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let p = ds.covariate_names.len();
    let mut push = |subject: &SubjectSeries, kind, detail: String| {
        violations.push(Violation {
            subject: Some(subject.id.clone()),
            kind,
            detail,
        })
    };
    for s in &ds.subjects {
        let n = s.times.len();
        if n == 0 {
            push(s, ViolationKind::NoObservations, String::new());
            continue;
        }
        if s.mediator.len() != n || s.outcome.len() != n || s.covariates.nrows() != n {
            push(
                s,
                ViolationKind::LengthMismatch,
                format!(
                    "{} times, {} mediator, {} outcome, {} covariate rows",
                    n,
                    s.mediator.len(),
                    s.outcome.len(),
                    s.covariates.nrows()
                ),
            );
        }
        if s.covariates.ncols() != p {
            push(
                s,
                ViolationKind::CovariateWidth,
                format!("expected {p} columns, found {}", s.covariates.ncols()),
            );
        }
        if s.z > 1 {
            push(s, ViolationKind::BadTreatment, format!("z = {}", s.z));
        }
        let finite = s.times.iter().all(|v| v.is_finite())
            && s.mediator.iter().all(|v| v.is_finite())
            && s.outcome.iter().all(|v| v.is_finite())
            && s.covariates.iter().all(|v| v.is_finite());
        if !finite {
            push(s, ViolationKind::NonFinite, String::new());
        }
        if let Some(j) = s.times.windows(2).position(|w| !(w[1] > w[0])) {
            push(
                s,
                ViolationKind::NonIncreasingTimes,
                format!(
                    "t[{}] = {}, t[{}] = {}",
                    j,
                    s.times[j],
                    j + 1,
                    s.times[j + 1]
                ),
            );
        }
        let (lo, hi) = ds.time_range;
        if s.times.iter().any(|&t| t < lo || t > hi) {
            push(
                s,
                ViolationKind::TimeOutOfRange,
                format!("range [{lo}, {hi}]"),
            );
        }
    }
    let counts = ds.arm_counts();
    for (arm, &count) in counts.iter().enumerate() {
        if count == 0 {
            violations.push(Violation {
                subject: None,
                kind: ViolationKind::ArmEmpty,
                detail: format!("z = {arm}"),
            });
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(csv: &str, schema: &Schema) -> Result<Dataset> {
        read_dataset(csv.as_bytes(), schema, OutcomeTransform::None)
    }

    fn xschema() -> Schema {
        Schema::with_covariates(&["x1".to_string()])
    }

    #[test]
    fn loads_three_rows_one_subject() {
        let csv = "id,treatment,time,mediator,outcome,x1\n\
                   a,1,0.1,1.0,2.0,0.5\n\
                   a,1,0.2,1.1,2.1,0.6\n\
                   a,1,0.3,1.2,2.2,0.7\n";
        let ds = load_str(csv, &xschema()).unwrap();
        assert_eq!(ds.n_subjects(), 1);
        assert_eq!(ds.subjects[0].n_obs(), 3);
    }

    #[test]
    fn missing_mediator_column_names_it() {
        let csv = "id,treatment,time,outcome\na,1,0.1,2.0\n";
        let err = load_str(csv, &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "mediator"));
        assert!(err.to_string().contains("mediator"));
    }

    #[test]
    fn sorts_times_and_permutes_rows_together() {
        let csv = "id,treatment,time,mediator,outcome,x1\n\
                   a,0,0.9,9,90,900\n\
                   a,0,0.1,1,10,100\n\
                   a,0,0.5,5,50,500\n";
        let ds = load_str(csv, &xschema()).unwrap();
        let s = &ds.subjects[0];
        assert_eq!(s.times, vec![0.1, 0.5, 0.9]);
        assert_eq!(s.mediator, vec![1.0, 5.0, 9.0]);
        assert_eq!(s.outcome, vec![10.0, 50.0, 90.0]);
        assert_eq!(s.covariates.column(0).as_slice(), &[100.0, 500.0, 900.0]);
    }

    #[test]
    fn bad_treatment_reports_row() {
        let csv = "id,treatment,time,mediator,outcome\n\
                   a,1,0.1,1,1\n\
                   b,2,0.1,1,1\n";
        match load_str(csv, &Schema::default()).unwrap_err() {
            Error::Row { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
        let csv = "id,treatment,time,mediator,outcome\na,NaN,0.1,1,1\n";
        assert!(matches!(
            load_str(csv, &Schema::default()),
            Err(Error::Row { row: 1, .. })
        ));
    }

    #[test]
    fn log_transform_rejects_nonpositive_outcome() {
        let csv = "id,treatment,time,mediator,outcome\na,1,0.1,1,0\n";
        let err =
            read_dataset(csv.as_bytes(), &Schema::default(), OutcomeTransform::Log).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }));
        let csv = "id,treatment,time,mediator,outcome\na,1,0.1,1,2.718281828459045\n";
        let ds = read_dataset(csv.as_bytes(), &Schema::default(), OutcomeTransform::Log).unwrap();
        assert!((ds.subjects[0].outcome[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blank_cells_rejected() {
        let csv = "id,treatment,time,mediator,outcome\na,1,0.1,,1\n";
        assert!(matches!(
            load_str(csv, &Schema::default()),
            Err(Error::Row { row: 1, .. })
        ));
    }

    #[test]
    fn duplicate_times_rejected_on_load() {
        let csv = "id,treatment,time,mediator,outcome\na,1,0.1,1,1\na,1,0.1,2,2\n";
        assert!(matches!(
            load_str(csv, &Schema::default()),
            Err(Error::Validation(_))
        ));
    }

    fn subject(id: &str, z: u8, times: Vec<f64>) -> SubjectSeries {
        let n = times.len();
        SubjectSeries {
            id: id.into(),
            z,
            times,
            mediator: vec![0.0; n],
            outcome: vec![0.0; n],
            covariates: DMatrix::zeros(n, 0),
        }
    }

    #[test]
    fn normalize_divides_by_t_max() {
        let ds = Dataset::new(
            vec![
                subject("a", 0, vec![0.0, 9.0, 18.0]),
                subject("b", 1, vec![3.0]),
            ],
            vec![],
        );
        let (norm, scale) = normalize_time(&ds).unwrap();
        assert_eq!(scale, 18.0);
        assert_eq!(norm.subjects[0].times, vec![0.0, 0.5, 1.0]);
        let (again, scale2) = normalize_time(&norm).unwrap();
        assert_eq!(scale2, 1.0);
        assert_eq!(again, norm);
    }

    #[test]
    fn normalize_rejects_empty_and_zero_range() {
        let empty = Dataset::new(vec![], vec![]);
        assert!(matches!(
            normalize_time(&empty),
            Err(Error::DegenerateRange(_))
        ));
        let zeros = Dataset::new(vec![subject("a", 0, vec![0.0])], vec![]);
        assert!(matches!(
            normalize_time(&zeros),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn validate_reports_violations() {
        let ok = Dataset::new(
            vec![subject("a", 0, vec![0.1, 0.2]), subject("b", 1, vec![0.3])],
            vec![],
        );
        assert!(validate(&ok).is_empty());

        let dup = Dataset::new(
            vec![subject("a", 0, vec![0.1, 0.1]), subject("b", 1, vec![0.3])],
            vec![],
        );
        let report = validate(&dup);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].kind, ViolationKind::NonIncreasingTimes);
        assert_eq!(report.violations[0].subject.as_deref(), Some("a"));
        assert!(report.violations[0]
            .to_string()
            .contains("non-increasing times"));

        let one_arm = Dataset::new(vec![subject("a", 1, vec![0.1])], vec![]);
        let report = validate(&one_arm);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0]
            .to_string()
            .contains("treatment arm empty"));
    }
}
