use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::record::MtsRecord;
use super::window::MtsWindow;
use crate::error::{Error, Result};

/// Smallest standard deviation a variable may be scaled by.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-variable standard normalisation, fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub variables: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Mean and population standard deviation over the non-missing entries
    /// of every variable. A variable with no observations gets `(0, 1)`.
    pub fn fit(record: &MtsRecord) -> Self {
        let n = record.n_vars();
        let mut mean = vec![0.0; n];
        let mut std = vec![1.0; n];
        for v in 0..n {
            let obs: Vec<f64> = record.column(v).flatten().collect();
            if obs.is_empty() {
                continue;
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64;
            mean[v] = m;
            std[v] = var.sqrt().max(STD_FLOOR);
        }
        Normalizer {
            variables: record.variables.clone(),
            mean,
            std,
        }
    }

    /// Leaves every value unchanged.
    pub fn identity(variables: Vec<String>) -> Self {
        let n = variables.len();
        Normalizer {
            variables,
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn transform(&self, var: usize, x: f64) -> f64 {
        (x - self.mean[var]) / self.std[var]
    }

    pub fn inverse(&self, var: usize, z: f64) -> f64 {
        z * self.std[var] + self.mean[var]
    }

    /// Inverse transform through the target variable (index 0).
    pub fn denormalize_target(&self, z: f64) -> f64 {
        self.inverse(0, z)
    }
}

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let s = SplitSpec { train, validation, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config(format!("split fractions must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }

    /// Contiguous row ranges `(train, validation, test)` for `len` rows.
    pub fn ranges(&self, len: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
        let a = ((len as f64) * self.train).floor() as usize;
        let b = (((len as f64) * (self.train + self.validation)).floor() as usize).max(a);
        let b = b.min(len);
        (0..a, a..b, b..len)
    }

    /// The record cut into three chronological pieces.
    pub fn split(&self, record: &MtsRecord) -> (MtsRecord, MtsRecord, MtsRecord) {
        let (tr, va, te) = self.ranges(record.len());
        (record.slice(tr), record.slice(va), record.slice(te))
    }
}

/// Sliding windows of `history` steps with stride 1, targets `horizon`
/// steps after the last observed step.
///
/// Values are normalised and missing entries become 0 (the training mean).
/// Windows whose target is missing are dropped. A record shorter than
/// `history + horizon` yields no windows.
pub fn make_windows(record: &MtsRecord, normalizer: &Normalizer, history: usize, horizon: usize) -> Result<Vec<MtsWindow>> {
    if history == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("history and horizon must be at least 1".into()));
    }
    if normalizer.variables != record.variables {
        return Err(Error::InvalidArgument(format!(
            "normalizer variables {:?} do not match record {:?}",
            normalizer.variables, record.variables
        )));
    }
    let m = record.len();
    let n = record.n_vars();
    if m < history + horizon {
        return Ok(Vec::new());
    }
    let normalized: Vec<Vec<f64>> = (0..n)
        .map(|v| {
            record
                .column(v)
                .map(|x| x.map_or(0.0, |x| normalizer.transform(v, x)))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(m - history - horizon + 1);
    for start in 0..=(m - history - horizon) {
        let Some(y) = record.values[start + history + horizon - 1][0] else {
            continue;
        };
        let mut values = Vec::with_capacity(n * history);
        for col in &normalized {
            values.extend_from_slice(&col[start..start + history]);
        }
        let w = MtsWindow::new(n, history, values, normalizer.transform(0, y))?
            .with_provenance(record.participant.clone(), record.origin + start);
        out.push(w);
    }
    Ok(out)
}
