//! Variable importance read off attention keys, and empirical checks of the
//! static-ranking and linearisation-gap properties.
//!
//! With LeakyReLU removed, a score splits into a receiver term plus a sender
//! term `a2ᵀkʲ`. The sender term is the per-timestep importance `v_tʲ`;
//! averaging over layers, timesteps and examples gives a dataset ranking.

mod export;

use serde::{Deserialize, Serialize};

use crate::data::MtsWindow;
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, GarnnModel, GraphAttentionLayer, Preactivation, TimestepAttention, Variant};

pub use export::{ranking_table, render_heatmap_svg, write_importance_csv, write_ranking_csv};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sʲ = (1/N) Σₙ sⁿʲ` over receivers, post-LeakyReLU scores.
pub fn mean_raw_score(att: &TimestepAttention) -> Vec<f64> {
    let n = att.n_vars;
    (0..n)
        .map(|j| (0..n).map(|r| att.score(r, j)).sum::<f64>() / n as f64)
        .collect()
}

/// Scores with LeakyReLU stripped: `a1ᵀqⁿ + a2ᵀkʲ` (GAT) or `aᵀ(qⁿ + kʲ)`
/// (GATv2), row-major receiver × sender.
pub fn linearized_scores(att: &TimestepAttention, layer: &GraphAttentionLayer) -> Result<Vec<f64>> {
    match (&att.preact, layer.variant()) {
        (Preactivation::Scalar(m), Variant::Gat) => Ok(m.clone()),
        (Preactivation::Vector { dim, values }, Variant::Gatv2) => {
            let a = layer.key_attention();
            if a.len() != *dim {
                return Err(Error::shape("linearized_scores", &[&[a.len()], &[*dim]]));
            }
            Ok(values.chunks(*dim).map(|m| dot(a, m)).collect())
        }
        (Preactivation::Missing, _) => Err(Error::MissingPreactivations),
        _ => Err(Error::InvalidArgument("trace and layer variants differ".into())),
    }
}

/// `v_t^{j,l} = a2ᵀ k_t^{j,l}` for one layer.
pub fn variable_importance_layer(layer: &GraphAttentionLayer, key: &[f64]) -> f64 {
    dot(layer.key_attention(), key)
}

/// `v_tʲ` for every variable: the layer-mean of `a2ᵀkʲ`.
pub fn variable_importance_t(layers: &[GraphAttentionLayer], atts: &[TimestepAttention]) -> Result<Vec<f64>> {
    if layers.is_empty() || layers.len() != atts.len() {
        return Err(Error::shape("variable_importance_t", &[&[layers.len()], &[atts.len()]]));
    }
    let n = atts[0].n_vars;
    let mut v = vec![0.0; n];
    for (layer, att) in layers.iter().zip(atts) {
        for (j, vj) in v.iter_mut().enumerate() {
            *vj += variable_importance_layer(layer, att.key(j));
        }
    }
    let l = layers.len() as f64;
    Ok(v.into_iter().map(|x| x / l).collect())
}

/// `N × T` per-example importance `v_tʲ`, row-major by variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub n_vars: usize,
    pub timesteps: usize,
    pub values: Vec<f64>,
}

impl ImportanceMatrix {
    pub fn new(n_vars: usize, timesteps: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_vars * timesteps {
            return Err(Error::shape("importance_matrix", &[&[n_vars, timesteps], &[values.len()]]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("importance_matrix".into()));
        }
        Ok(ImportanceMatrix { n_vars, timesteps, values })
    }

    pub fn get(&self, var: usize, t: usize) -> f64 {
        self.values[var * self.timesteps + t]
    }

    pub fn row(&self, var: usize) -> &[f64] {
        &self.values[var * self.timesteps..(var + 1) * self.timesteps]
    }
}

fn model_layers(model: &GarnnModel) -> Result<Vec<GraphAttentionLayer>> {
    (0..model.config().layers).map(|l| model.layer(l)).collect()
}

/// Importance matrix of one window from its attention trace.
pub fn importance_matrix(layers: &[GraphAttentionLayer], trace: &AttentionTrace) -> Result<ImportanceMatrix> {
    let t_len = trace.timesteps();
    let n = trace.steps.first().and_then(|s| s.first()).map_or(0, |a| a.n_vars);
    let mut values = vec![0.0; n * t_len];
    for (t, step) in trace.steps.iter().enumerate() {
        for (j, v) in variable_importance_t(layers, step)?.into_iter().enumerate() {
            values[j * t_len + t] = v;
        }
    }
    ImportanceMatrix::new(n, t_len, values)
}

/// Importance matrices of `windows`, evaluated in batches.
pub fn explain(model: &GarnnModel, windows: &[MtsWindow]) -> Result<Vec<ImportanceMatrix>> {
    const CHUNK: usize = 128;
    let layers = model_layers(model)?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let refs: Vec<&MtsWindow> = chunk.iter().collect();
        let (_, traces) = model.forward_batch(&refs)?;
        for trace in &traces {
            out.push(importance_matrix(&layers, trace)?);
        }
    }
    Ok(out)
}

/// Dataset importance `vʲ(I)` and its descending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub values: Vec<f64>,
    /// Variable indices, most important first; ties broken by index.
    pub order: Vec<usize>,
}

impl ImportanceRanking {
    pub fn from_values(values: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        ImportanceRanking { values, order }
    }

    /// 1-based rank of `var`.
    pub fn rank_of(&self, var: usize) -> usize {
        self.order.iter().position(|&v| v == var).map_or(0, |p| p + 1)
    }
}

/// `vʲ(I) = (1/(I·T)) Σ_{i,t} v_tʲ(i)` over every timestep.
pub fn dataset_importance(matrices: &[ImportanceMatrix]) -> Result<ImportanceRanking> {
    dataset_importance_masked(matrices, None)
}

/// As [`dataset_importance`], optionally restricted to cells whose mask
/// entry (`N × T`, per example) is true.
pub fn dataset_importance_masked(matrices: &[ImportanceMatrix], masks: Option<&[Vec<bool>]>) -> Result<ImportanceRanking> {
    let first = matrices.first().ok_or(Error::Empty("dataset_importance"))?;
    let (n, t_len) = (first.n_vars, first.timesteps);
    if let Some(m) = masks {
        if m.len() != matrices.len() {
            return Err(Error::shape("dataset_importance", &[&[matrices.len()], &[m.len()]]));
        }
    }
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (i, mat) in matrices.iter().enumerate() {
        if mat.n_vars != n || mat.timesteps != t_len {
            return Err(Error::shape("dataset_importance", &[&[mat.n_vars, mat.timesteps], &[n, t_len]]));
        }
        let mask = masks.map(|m| &m[i]);
        if let Some(m) = mask {
            if m.len() != n * t_len {
                return Err(Error::shape("dataset_importance", &[&[m.len()], &[n * t_len]]));
            }
        }
        for j in 0..n {
            for t in 0..t_len {
                if mask.map_or(true, |m| m[j * t_len + t]) {
                    sum[j] += mat.get(j, t);
                    count[j] += 1;
                }
            }
        }
    }
    let values = sum
        .into_iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(ImportanceRanking::from_values(values))
}

/// `N × T` importance min-max scaled over the whole matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_vars: usize,
    pub timesteps: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, var: usize, t: usize) -> f64 {
        self.values[var * self.timesteps + t]
    }
}

/// Global min-max scaling to `[0, 1]`; a constant matrix maps to 0.5.
pub fn feature_map(m: &ImportanceMatrix) -> FeatureMap {
    let lo = m.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        m.values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; m.values.len()]
    };
    FeatureMap {
        n_vars: m.n_vars,
        timesteps: m.timesteps,
        values,
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", &[&[x.len()], &[y.len()]]));
    }
    if x.len() < 2 {
        return Err(Error::Empty("spearman"));
    }
    crate::metrics::pearson(&ranks(x), &ranks(y))
        .ok_or_else(|| Error::InvalidArgument("spearman: constant input".into()))
}

/// Mean absolute change in prediction (model units) when channel `var` is
/// replaced by the imputation value 0.
pub fn ablation_oracle(model: &GarnnModel, windows: &[MtsWindow], var: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("ablation_oracle"));
    }
    if var >= model.config().n_vars {
        return Err(Error::InvalidArgument(format!("variable {var} out of range")));
    }
    let base = model.predict(windows)?;
    let ablated: Vec<MtsWindow> = windows.iter().map(|w| w.with_channel_filled(var, 0.0)).collect();
    let after = model.predict(&ablated)?;
    Ok(base.iter().zip(&after).map(|(a, b)| (a - b).abs()).sum::<f64>() / windows.len() as f64)
}

/// Mean `v_tʲ` over cells whose source row is an event, and over the rest.
///
/// `mask` indexes rows of the record the windows were cut from; a window
/// starting at row `s` covers rows `s..s+T`.
pub fn event_contrast(matrices: &[ImportanceMatrix], windows: &[MtsWindow], var: usize, mask: &[bool]) -> Result<(f64, f64)> {
    if matrices.len() != windows.len() {
        return Err(Error::shape("event_contrast", &[&[matrices.len()], &[windows.len()]]));
    }
    let (mut ev, mut ne) = ((0.0, 0usize), (0.0, 0usize));
    for (m, w) in matrices.iter().zip(windows) {
        for t in 0..m.timesteps {
            let row = w.start + t;
            let hit = *mask.get(row).ok_or_else(|| {
                Error::InvalidArgument(format!("event mask has {} rows, window needs row {row}", mask.len()))
            })?;
            let acc = if hit { &mut ev } else { &mut ne };
            acc.0 += m.get(var, t);
            acc.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { f64::NAN } else { s / c as f64 };
    Ok((mean(ev), mean(ne)))
}

/// Linearisation gap for one (timestep, layer, sender).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub t: usize,
    pub layer: usize,
    pub var: usize,
    /// `sʲ`, mean post-LeakyReLU score.
    pub raw: f64,
    /// `ŝʲ`, mean linearised score.
    pub linear: f64,
    pub gap: f64,
    pub bound: f64,
}

/// Absolute slack allowed on `|gap| ≤ bound` for rounding.
pub const GAP_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub alpha: f64,
    pub variant: Variant,
    pub entries: Vec<GapEntry>,
}

impl GapReport {
    pub fn max_abs_gap(&self) -> f64 {
        self.entries.iter().map(|e| e.gap.abs()).fold(0.0, f64::max)
    }

    /// Largest `|gap| − bound`.
    pub fn max_excess(&self) -> f64 {
        self.entries.iter().map(|e| e.gap.abs() - e.bound).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn within_bound(&self) -> bool {
        self.entries.iter().all(|e| e.gap.abs() <= e.bound + GAP_SLACK)
    }

    /// Every gap `s − ŝ ≥ 0` up to rounding.
    pub fn nonnegative(&self) -> bool {
        self.entries.iter().all(|e| e.gap >= -GAP_SLACK)
    }

    pub fn merge(&mut self, other: GapReport) {
        self.entries.extend(other.entries);
    }
}

/// Gap between mean raw and linearised scores with its Cauchy-Schwarz bound.
///
/// GATv2: `bound = ‖a‖·‖(1/N)Σₙ(Ĩ − I)mⁿʲ‖` with `Ĩ = diag(1 if m ≥ 0 else α)`.
/// GAT: the scalar analogue `|(1/N)Σₙ(ι − 1)mⁿʲ|`.
pub fn theorem3_gap(trace: &AttentionTrace, layers: &[GraphAttentionLayer], alpha: f64) -> Result<GapReport> {
    if layers.len() != trace.layers() {
        return Err(Error::shape("theorem3_gap", &[&[layers.len()], &[trace.layers()]]));
    }
    let variant = layers.first().ok_or(Error::Empty("theorem3_gap"))?.variant();
    let mut entries = Vec::new();
    for (t, step) in trace.steps.iter().enumerate() {
        for (l, (att, layer)) in step.iter().zip(layers).enumerate() {
            let n = att.n_vars;
            let raw = mean_raw_score(att);
            let lin = linearized_scores(att, layer)?;
            let slope = |m: f64| if m >= 0.0 { 0.0 } else { alpha - 1.0 };
            for j in 0..n {
                let linear = (0..n).map(|r| lin[r * n + j]).sum::<f64>() / n as f64;
                let bound = match &att.preact {
                    Preactivation::Scalar(m) => {
                        ((0..n).map(|r| slope(m[r * n + j]) * m[r * n + j]).sum::<f64>() / n as f64).abs()
                    }
                    Preactivation::Vector { dim, values } => {
                        let mut acc = vec![0.0; *dim];
                        for r in 0..n {
                            let m = &values[(r * n + j) * dim..(r * n + j + 1) * dim];
                            for (a, &x) in acc.iter_mut().zip(m) {
                                *a += slope(x) * x;
                            }
                        }
                        let norm_a = layer.key_attention().iter().map(|x| x * x).sum::<f64>().sqrt();
                        norm_a * acc.iter().map(|x| (x / n as f64).powi(2)).sum::<f64>().sqrt()
                    }
                    Preactivation::Missing => return Err(Error::MissingPreactivations),
                };
                entries.push(GapEntry {
                    t,
                    layer: l,
                    var: j,
                    raw: raw[j],
                    linear,
                    gap: raw[j] - linear,
                    bound,
                });
            }
        }
    }
    Ok(GapReport { alpha, variant, entries })
}

/// Outcome of the static-ranking check at one (timestep, layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticRankingReport {
    pub t: usize,
    pub layer: usize,
    /// Sender order from linearised scores is the same for every receiver.
    pub receivers_agree: bool,
    /// That order equals the order of `a2ᵀkʲ`.
    pub matches_importance: bool,
    /// Whether post-LeakyReLU scores also agree across receivers. `false`
    /// is expected dynamic behaviour, not a failure.
    pub raw_receivers_agree: bool,
}

impl StaticRankingReport {
    pub fn passed(&self) -> bool {
        self.receivers_agree && self.matches_importance
    }
}

/// Descending argsort with index tie-break.
pub fn argsort_desc(x: &[f64]) -> Vec<usize> {
    ImportanceRanking::from_values(x.to_vec()).order
}

/// Relative spread below which two senders count as tied when orders are
/// compared.
pub const RANK_TIE_TOL: f64 = 1e-12;

/// Whether `x` and `y` order every pair of senders the same way. Pairs tied
/// within [`RANK_TIE_TOL`] in either input impose no constraint.
pub fn same_order(x: &[f64], y: &[f64]) -> bool {
    let scale = |v: &[f64]| v.iter().fold(1.0f64, |m, a| m.max(a.abs())) * RANK_TIE_TOL;
    let (tx, ty) = (scale(x), scale(y));
    let cmp = |v: &[f64], tol: f64, i: usize, j: usize| {
        let d = v[i] - v[j];
        if d > tol {
            1
        } else if d < -tol {
            -1
        } else {
            0
        }
    };
    x.len() == y.len()
        && (0..x.len()).all(|i| {
            (i + 1..x.len()).all(|j| {
                let (a, b) = (cmp(x, tx, i, j), cmp(y, ty, i, j));
                a == 0 || b == 0 || a == b
            })
        })
}

/// Checks that every receiver ranks senders identically under linearised
/// scores, and that the shared order is the order of `a2ᵀkʲ`.
///
/// Without ties this is exact argsort equality.
pub fn static_ranking_check(att: &TimestepAttention, layer: &GraphAttentionLayer) -> Result<StaticRankingReport> {
    let n = att.n_vars;
    let lin = linearized_scores(att, layer)?;
    let rows: Vec<&[f64]> = lin.chunks(n).collect();
    let importance: Vec<f64> = (0..n).map(|j| variable_importance_layer(layer, att.key(j))).collect();
    let receivers_agree = rows.iter().all(|r| same_order(r, rows[0]));
    let raw: Vec<&[f64]> = att.scores.chunks(n).collect();
    Ok(StaticRankingReport {
        t: 0,
        layer: 0,
        receivers_agree,
        matches_importance: receivers_agree && rows.iter().all(|r| same_order(r, &importance)),
        raw_receivers_agree: raw.iter().all(|r| same_order(r, raw[0])),
    })
}

/// [`static_ranking_check`] at every timestep and layer of a trace.
pub fn static_ranking_sweep(trace: &AttentionTrace, layers: &[GraphAttentionLayer]) -> Result<Vec<StaticRankingReport>> {
    let mut out = Vec::new();
    for (t, step) in trace.steps.iter().enumerate() {
        for (l, (att, layer)) in step.iter().zip(layers).enumerate() {
            let mut r = static_ranking_check(att, layer)?;
            r.t = t;
            r.layer = l;
            out.push(r);
        }
    }
    Ok(out)
}

/// Layers of `model` in order.
pub fn layers_of(model: &GarnnModel) -> Result<Vec<GraphAttentionLayer>> {
    model_layers(model)
}
