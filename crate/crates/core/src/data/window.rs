use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One example: an `N × T` history (variables as rows, normalised and
/// imputed) and the normalised target `H` steps past its end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtsWindow {
    n_vars: usize,
    timesteps: usize,
    values: Vec<f64>,
    pub target: f64,
    pub participant: String,
    /// Row of the source record holding the first timestep.
    pub start: usize,
}

impl MtsWindow {
    pub fn new(n_vars: usize, timesteps: usize, values: Vec<f64>, target: f64) -> Result<Self> {
        if values.len() != n_vars * timesteps {
            return Err(Error::shape("window", &[&[n_vars, timesteps], &[values.len()]]));
        }
        if n_vars == 0 || timesteps == 0 {
            return Err(Error::Empty("window"));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("window entry {bad}")));
        }
        Ok(MtsWindow {
            n_vars,
            timesteps,
            values,
            target,
            participant: String::new(),
            start: 0,
        })
    }

    pub fn with_provenance(mut self, participant: impl Into<String>, start: usize) -> Self {
        self.participant = participant.into();
        self.start = start;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// Row-major `N × T` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, var: usize, t: usize) -> f64 {
        self.values[var * self.timesteps + t]
    }

    pub fn set(&mut self, var: usize, t: usize, value: f64) {
        self.values[var * self.timesteps + t] = value;
    }

    /// The series of one variable.
    pub fn row(&self, var: usize) -> &[f64] {
        &self.values[var * self.timesteps..(var + 1) * self.timesteps]
    }

    /// Copy with variable `var` replaced by `value` at every timestep.
    pub fn with_channel_filled(&self, var: usize, value: f64) -> Self {
        let mut w = self.clone();
        w.values[var * self.timesteps..(var + 1) * self.timesteps].fill(value);
        w
    }
}
