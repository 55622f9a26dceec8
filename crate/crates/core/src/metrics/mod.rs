//! Forecast accuracy metrics on de-normalised glucose predictions.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(op: &'static str, y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() || y_hat.is_empty() {
        return Err(Error::Empty(op));
    }
    if y.len() != y_hat.len() {
        return Err(Error::shape(op, &[&[y.len()], &[y_hat.len()]]));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{op} input")));
    }
    Ok(())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair("rmse", y, y_hat)?;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair("mae", y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (b - a).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error, in percent. Every `y` must be positive.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair("mape", y, y_hat)?;
    if let Some(bad) = y.iter().find(|&&v| v <= 0.0) {
        return Err(Error::InvalidArgument(format!("mape needs positive targets, got {bad}")));
    }
    Ok(100.0 * y.iter().zip(y_hat).map(|(a, b)| (b - a).abs() / a).sum::<f64>() / y.len() as f64)
}

/// Piecewise penalty for glucose-specific RMSE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// Weight on overestimates when `y < hypo_threshold`.
    pub w_hypo: f64,
    /// Weight on underestimates when `y > hyper_threshold`.
    pub w_hyper: f64,
    pub hypo_threshold: f64,
    pub hyper_threshold: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            w_hypo: 2.5,
            w_hyper: 2.5,
            hypo_threshold: 70.0,
            hyper_threshold: 180.0,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_hypo >= 1.0) || !(self.w_hyper >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "penalty weights must be at least 1, got {} and {}",
                self.w_hypo, self.w_hyper
            )));
        }
        Ok(())
    }

    pub fn weight(&self, y: f64, y_hat: f64) -> f64 {
        if y < self.hypo_threshold && y_hat > y {
            self.w_hypo
        } else if y > self.hyper_threshold && y_hat < y {
            self.w_hyper
        } else {
            1.0
        }
    }
}

pub fn g_rmse(y: &[f64], y_hat: &[f64], penalty: &PenaltyConfig) -> Result<f64> {
    check_pair("g_rmse", y, y_hat)?;
    penalty.validate()?;
    let s: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&a, &b)| penalty.weight(a, b) * (b - a) * (b - a))
        .sum();
    Ok((s / y.len() as f64).sqrt())
}

/// Pearson correlation, `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let (x, y) = (&x[..n], &y[..n]);
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeLag {
    pub minutes: f64,
    pub shift: usize,
    /// Correlation at the selected shift (NaN when degenerate).
    pub correlation: f64,
    /// No shift had a defined correlation.
    pub degenerate: bool,
}

/// Shift `ℓ ∈ 0..=max_shift` maximising `corr(ŷ_t, y_{t−ℓ})`, reported in
/// minutes. Ties go to the smaller shift.
pub fn time_lag(y: &[f64], y_hat: &[f64], interval_minutes: f64, max_shift: usize) -> Result<TimeLag> {
    check_pair("time_lag", y, y_hat)?;
    if y.len() <= max_shift + 2 {
        return Err(Error::InvalidArgument(format!(
            "time_lag needs more than {} samples, got {}",
            max_shift + 2,
            y.len()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for shift in 0..=max_shift {
        let Some(c) = pearson(&y_hat[shift..], &y[..y.len() - shift]) else {
            continue;
        };
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((shift, c));
        }
    }
    Ok(match best {
        Some((shift, correlation)) => TimeLag {
            minutes: shift as f64 * interval_minutes,
            shift,
            correlation,
            degenerate: false,
        },
        None => TimeLag {
            minutes: 0.0,
            shift: 0,
            correlation: f64::NAN,
            degenerate: true,
        },
    })
}

/// Every metric for one (participant, seed) evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub rmse: f64,
    pub mape: f64,
    pub mae: f64,
    pub g_rmse: f64,
    pub time_lag: f64,
    pub lag_degenerate: bool,
}

pub const METRIC_NAMES: [&str; 5] = ["rmse", "mape", "mae", "g_rmse", "time_lag"];

impl MetricSet {
    pub fn evaluate(y: &[f64], y_hat: &[f64], interval_minutes: f64, max_shift: usize, penalty: &PenaltyConfig) -> Result<Self> {
        let lag = time_lag(y, y_hat, interval_minutes, max_shift)?;
        Ok(MetricSet {
            rmse: rmse(y, y_hat)?,
            mape: mape(y, y_hat)?,
            mae: mae(y, y_hat)?,
            g_rmse: g_rmse(y, y_hat, penalty)?,
            time_lag: lag.minutes,
            lag_degenerate: lag.degenerate,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.rmse, self.mape, self.mae, self.g_rmse, self.time_lag]
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// A pooled metric: mean, spread over seeds and spread over participants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub mean: f64,
    pub sd_seeds: f64,
    pub sd_participants: f64,
}

impl std::fmt::Display for Pooled {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}({:.2})", self.mean, self.sd_seeds, self.sd_participants)
    }
}

/// Metrics per participant and seed, pooled as `mean±sd1(sd2)`.
///
/// `sd1` is the spread over seeds of the participant-averaged metric; `sd2`
/// is the spread over participants of the seed-averaged metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// participant → seed → metrics.
    pub runs: BTreeMap<String, BTreeMap<u64, MetricSet>>,
}

impl MetricReport {
    pub fn add(&mut self, participant: impl Into<String>, seed: u64, metrics: MetricSet) {
        self.runs.entry(participant.into()).or_default().insert(seed, metrics);
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.values().flat_map(|m| m.keys().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Pooled value of metric `index` (order of [`METRIC_NAMES`]).
    pub fn pooled(&self, index: usize) -> Result<Pooled> {
        if self.runs.is_empty() {
            return Err(Error::Empty("metric_report"));
        }
        let per_seed: Vec<f64> = self
            .seeds()
            .iter()
            .map(|s| {
                let v: Vec<f64> = self.runs.values().filter_map(|m| m.get(s)).map(|m| m.values()[index]).collect();
                mean(&v)
            })
            .collect();
        let per_participant: Vec<f64> = self
            .runs
            .values()
            .map(|m| mean(&m.values().map(|x| x.values()[index]).collect::<Vec<_>>()))
            .collect();
        Ok(Pooled {
            mean: mean(&per_seed),
            sd_seeds: sample_sd(&per_seed),
            sd_participants: sample_sd(&per_participant),
        })
    }

    /// One row per participant and seed, then one pooled row per metric.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["participant".to_string(), "seed".to_string()];
        header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (p, seeds) in &self.runs {
            for (s, m) in seeds {
                let mut row = vec![p.clone(), s.to_string()];
                row.extend(m.values().iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        for stat in ["mean", "sd_seeds", "sd_participants"] {
            let mut row = vec!["pooled".to_string(), stat.to_string()];
            for i in 0..METRIC_NAMES.len() {
                let p = self.pooled(i)?;
                let v = match stat {
                    "mean" => p.mean,
                    "sd_seeds" => p.sd_seeds,
                    _ => p.sd_participants,
                };
                row.push(v.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<metric csv>", e))?;
        Ok(())
    }

    /// Text table in `mean±sd1(sd2)` form with a leading method label.
    pub fn table(&self, method: &str) -> Result<String> {
        let mut out = format!(
            "{:<16} {:<22} {:<22} {:<22} {:<22} {:<22}\n",
            "method", "RMSE (mg/dL)", "MAPE (%)", "MAE (mg/dL)", "gRMSE (mg/dL)", "time lag (min)"
        );
        let cells: Vec<String> = (0..METRIC_NAMES.len())
            .map(|i| self.pooled(i).map(|p| p.to_string()))
            .collect::<Result<_>>()?;
        out.push_str(&format!(
            "{:<16} {:<22} {:<22} {:<22} {:<22} {:<22}\n",
            method, cells[0], cells[1], cells[2], cells[3], cells[4]
        ));
        Ok(out)
    }
}
