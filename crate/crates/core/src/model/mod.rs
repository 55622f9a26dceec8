//! GARNN forward pass.
//!
//! Each timestep builds a complete graph whose nodes are the variables.
//! Scalar observations are embedded per variable, refined by `L` attention
//! layers, concatenated and fed to a GRU; an MLP reads the last hidden state.
//!
//! The batched forward lays out `T·B` graphs in `(t, b)` order so that the
//! concatenated node states of one timestep form contiguous rows.

mod checkpoint;
mod gru;
mod layer;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::data::MtsWindow;
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, Windowing, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gru::GruCell;
pub use layer::{score_gat, score_gatv2, GraphAttentionLayer, Preactivation, Scoring, TimestepAttention, Variant};

use gru::{gru_step_on_tape, head_on_tape, project_inputs, GruVars, HeadVars};
use layer::{layer_on_tape, LayerOutput, LayerVars};

static SOFTMAX_ROWS_CHECKED: AtomicU64 = AtomicU64::new(0);
static SOFTMAX_ROWS_OFF: AtomicU64 = AtomicU64::new(0);
/// Tolerance on `|Σ_j s̃ⁿʲ − 1|` for every attention row.
pub const SOFTMAX_ROW_TOL: f64 = 1e-12;

pub(crate) fn record_softmax_rows(weights: &[f64], n: usize) {
    let mut off = 0;
    let rows = weights.len() / n.max(1);
    for row in weights.chunks(n.max(1)) {
        if (row.iter().sum::<f64>() - 1.0).abs() > SOFTMAX_ROW_TOL || row.iter().any(|&w| w < 0.0) {
            off += 1;
        }
    }
    SOFTMAX_ROWS_CHECKED.fetch_add(rows as u64, Ordering::Relaxed);
    SOFTMAX_ROWS_OFF.fetch_add(off, Ordering::Relaxed);
}

/// `(rows checked, rows off by more than SOFTMAX_ROW_TOL)` over every
/// attention layer evaluated in this process.
pub fn softmax_row_audit() -> (u64, u64) {
    (
        SOFTMAX_ROWS_CHECKED.load(Ordering::Relaxed),
        SOFTMAX_ROWS_OFF.load(Ordering::Relaxed),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of variables `N`.
    pub n_vars: usize,
    /// Node representation size `E`.
    pub embed_dim: usize,
    /// Query/key size `A`.
    pub attn_dim: usize,
    /// GRU state size `D`.
    pub hidden_dim: usize,
    /// Width of the MLP head's hidden layer.
    pub head_hidden: usize,
    /// Number of stacked attention layers `L`.
    pub layers: usize,
    pub variant: Variant,
    /// LeakyReLU slope inside the scoring function.
    pub alpha: f64,
}

impl ModelConfig {
    pub fn new(n_vars: usize, variant: Variant) -> Self {
        ModelConfig {
            n_vars,
            embed_dim: 8,
            attn_dim: 8,
            hidden_dim: 128,
            head_hidden: 64,
            layers: 1,
            variant,
            alpha: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_vars", self.n_vars),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("hidden_dim", self.hidden_dim),
            ("head_hidden", self.head_hidden),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Parameter names and shapes, with the fan-in used for initialisation
    /// (`None` for biases).
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let (n, e, a, d, hh) = (self.n_vars, self.embed_dim, self.attn_dim, self.hidden_dim, self.head_hidden);
        let mut out = vec![
            ("embed.w".to_string(), vec![n, e], Some(1)),
            ("embed.b".to_string(), vec![n, e], None),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.push((p("w1"), vec![a, e], Some(e)));
            out.push((p("b1"), vec![a], None));
            match self.variant {
                Variant::Gat => {
                    out.push((p("a1"), vec![a], Some(a)));
                    out.push((p("a2"), vec![a], Some(a)));
                }
                Variant::Gatv2 => {
                    out.push((p("w2"), vec![a, e], Some(e)));
                    out.push((p("b2"), vec![a], None));
                    out.push((p("a"), vec![a], Some(a)));
                }
            }
            out.push((p("w"), vec![e, e], Some(e)));
            out.push((p("b"), vec![e], None));
        }
        for g in ["z", "r", "h"] {
            out.push((format!("gru.w_{g}"), vec![d, n * e], Some(n * e)));
            out.push((format!("gru.u_{g}"), vec![d, d], Some(d)));
            out.push((format!("gru.b_{g}"), vec![d], None));
        }
        out.push(("head.w1".to_string(), vec![hh, d], Some(d)));
        out.push(("head.b1".to_string(), vec![hh], None));
        out.push(("head.w2".to_string(), vec![1, hh], Some(hh)));
        out.push(("head.b2".to_string(), vec![1], None));
        out
    }

    /// Name of the attention vector applied to keys in layer `l`.
    pub fn key_attention_name(&self, l: usize) -> String {
        match self.variant {
            Variant::Gat => format!("layer{l}.a2"),
            Variant::Gatv2 => format!("layer{l}.a"),
        }
    }
}

/// A GARNN: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GarnnModel {
    config: ModelConfig,
    params: ParamSet,
}

/// Attention records of one window, indexed `[t][l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub steps: Vec<Vec<TimestepAttention>>,
}

impl AttentionTrace {
    pub fn timesteps(&self) -> usize {
        self.steps.len()
    }

    pub fn layers(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn at(&self, t: usize, layer: usize) -> &TimestepAttention {
        &self.steps[t][layer]
    }
}

/// Tape handles of a batched forward pass.
pub struct ForwardVars {
    /// `[B, 1]` predictions.
    pub prediction: Var,
    pub(crate) layers: Vec<LayerOutput>,
    pub batch: usize,
    pub timesteps: usize,
}

/// `e = ReLU(w·x + b)` for one variable's scalar observation.
pub fn embed_variable(x: f64, w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("embed_variable input".into()));
    }
    if w.len() != b.len() {
        return Err(Error::shape("embed_variable", &[&[w.len()], &[b.len()]]));
    }
    Ok(w.iter().zip(b).map(|(w, b)| (w * x + b).max(0.0)).collect())
}

/// Lays out windows as `[T·B, N]` rows in `(t, b)` order.
fn batch_inputs(windows: &[&MtsWindow], n: usize) -> Result<(Tensor, usize)> {
    let first = windows.first().ok_or(Error::Empty("model_forward"))?;
    let t_len = first.timesteps();
    for w in windows {
        if w.n_vars() != n || w.timesteps() != t_len {
            return Err(Error::shape("model_forward", &[&[w.n_vars(), w.timesteps()], &[n, t_len]]));
        }
    }
    let b = windows.len();
    let mut data = vec![0.0; t_len * b * n];
    for (bi, w) in windows.iter().enumerate() {
        for v in 0..n {
            for (t, &x) in w.row(v).iter().enumerate() {
                data[(t * b + bi) * n + v] = x;
            }
        }
    }
    Ok((Tensor::new(vec![t_len * b, n], data)?, t_len))
}

/// Builds the full forward pass for `windows` on `tape` from bound parameters.
pub fn build_forward(config: &ModelConfig, tape: &mut Tape, p: &BoundParams, windows: &[&MtsWindow]) -> Result<ForwardVars> {
    let (n, e) = (config.n_vars, config.embed_dim);
    let (inputs, t_len) = batch_inputs(windows, n)?;
    let b = windows.len();
    let g = t_len * b;
    let x = tape.constant(inputs);

    let emb = tape.variable_affine(x, p.var("embed.w")?, p.var("embed.b")?)?;
    let mut state = tape.relu(emb)?;

    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let v = |s: &str| p.var(&format!("layer{l}.{s}"));
        let vars = match config.variant {
            Variant::Gat => LayerVars {
                w1: v("w1")?,
                b1: v("b1")?,
                w2: v("w1")?,
                b2: v("b1")?,
                a1: v("a1")?,
                a2: v("a2")?,
                w: v("w")?,
                b: v("b")?,
            },
            Variant::Gatv2 => LayerVars {
                w1: v("w1")?,
                b1: v("b1")?,
                w2: v("w2")?,
                b2: v("b2")?,
                a1: v("a")?,
                a2: v("a")?,
                w: v("w")?,
                b: v("b")?,
            },
        };
        let out = layer_on_tape(tape, &vars, state, config.variant, config.alpha)?;
        state = out.output;
        layers.push(out);
    }

    let seq = tape.reshape(state, &[g, n * e])?;
    let gv = GruVars {
        w_z: p.var("gru.w_z")?,
        u_z: p.var("gru.u_z")?,
        b_z: p.var("gru.b_z")?,
        w_r: p.var("gru.w_r")?,
        u_r: p.var("gru.u_r")?,
        b_r: p.var("gru.b_r")?,
        w_h: p.var("gru.w_h")?,
        u_h: p.var("gru.u_h")?,
        b_h: p.var("gru.b_h")?,
    };
    let proj = project_inputs(tape, &gv, seq)?;
    let mut h = tape.constant(Tensor::zeros(&[b, config.hidden_dim]));
    for t in 0..t_len {
        let gates = gru::GateInputs {
            z: tape.slice_rows(proj.z, t * b, b)?,
            r: tape.slice_rows(proj.r, t * b, b)?,
            h: tape.slice_rows(proj.h, t * b, b)?,
        };
        h = gru_step_on_tape(tape, &gv, gates, h)?;
    }
    let head = HeadVars {
        w1: p.var("head.w1")?,
        b1: p.var("head.b1")?,
        w2: p.var("head.w2")?,
        b2: p.var("head.b2")?,
    };
    let prediction = head_on_tape(tape, &head, h)?;
    Ok(ForwardVars {
        prediction,
        layers,
        batch: b,
        timesteps: t_len,
    })
}

/// Per-window attention traces from a finished forward pass.
pub(crate) fn extract_traces(tape: &Tape, fv: &ForwardVars, config: &ModelConfig) -> Vec<AttentionTrace> {
    (0..fv.batch)
        .map(|bi| AttentionTrace {
            steps: (0..fv.timesteps)
                .map(|t| {
                    fv.layers
                        .iter()
                        .map(|out| TimestepAttention::from_tape(tape, out, t * fv.batch + bi, config.n_vars, config.attn_dim))
                        .collect()
                })
                .collect(),
        })
        .collect()
}

impl GarnnModel {
    /// Uniform(±1/√fan_in) weights and zero biases, drawn in layout order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in config.parameter_layout() {
            let len: usize = shape.iter().product();
            let data = match fan_in {
                Some(f) => {
                    let bound = 1.0 / (f as f64).sqrt();
                    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                None => vec![0.0; len],
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(GarnnModel { config, params })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, _) in config.parameter_layout() {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(GarnnModel { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against the layout.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", &[shape, t.shape()]));
            }
        }
        Ok(GarnnModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the scoring slope (the parameters are untouched).
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.alpha = alpha;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.params.get(name)?.data().to_vec())
    }

    /// Embedding parameters `(w, b)` of variable `n`.
    pub fn embedding(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self.config.embed_dim;
        let w = self.params.get("embed.w")?.data()[n * e..(n + 1) * e].to_vec();
        let b = self.params.get("embed.b")?.data()[n * e..(n + 1) * e].to_vec();
        Ok((w, b))
    }

    pub fn layer(&self, l: usize) -> Result<GraphAttentionLayer> {
        let p = |s: &str| format!("layer{l}.{s}");
        let scoring = match self.config.variant {
            Variant::Gat => Scoring::Gat {
                a1: self.vector(&p("a1"))?,
                a2: self.vector(&p("a2"))?,
            },
            Variant::Gatv2 => Scoring::Gatv2 {
                w2: self.params.get(&p("w2"))?.clone(),
                b2: self.vector(&p("b2"))?,
                a: self.vector(&p("a"))?,
            },
        };
        Ok(GraphAttentionLayer {
            w1: self.params.get(&p("w1"))?.clone(),
            b1: self.vector(&p("b1"))?,
            w: self.params.get(&p("w"))?.clone(),
            b: self.vector(&p("b"))?,
            scoring,
            alpha: self.config.alpha,
        })
    }

    pub fn gru(&self) -> Result<GruCell> {
        let t = |s: &str| self.params.get(s).cloned();
        Ok(GruCell {
            w_z: t("gru.w_z")?,
            u_z: t("gru.u_z")?,
            b_z: self.vector("gru.b_z")?,
            w_r: t("gru.w_r")?,
            u_r: t("gru.u_r")?,
            b_r: self.vector("gru.b_r")?,
            w_h: t("gru.w_h")?,
            u_h: t("gru.u_h")?,
            b_h: self.vector("gru.b_h")?,
        })
    }

    /// Prediction and attention trace for one window.
    pub fn forward(&self, window: &MtsWindow) -> Result<(f64, AttentionTrace)> {
        let (preds, mut traces) = self.forward_batch(&[window])?;
        Ok((preds[0], traces.remove(0)))
    }

    /// Predictions (model units) and traces for a batch of windows.
    pub fn forward_batch(&self, windows: &[&MtsWindow]) -> Result<(Vec<f64>, Vec<AttentionTrace>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fv = build_forward(&self.config, &mut tape, &bound, windows)?;
        let preds = tape.value(fv.prediction).data().to_vec();
        let traces = extract_traces(&tape, &fv, &self.config);
        Ok((preds, traces))
    }

    /// Predictions in model (normalised) units, evaluated in chunks.
    pub fn predict(&self, windows: &[MtsWindow]) -> Result<Vec<f64>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(CHUNK) {
            let refs: Vec<&MtsWindow> = chunk.iter().collect();
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let fv = build_forward(&self.config, &mut tape, &bound, &refs)?;
            out.extend_from_slice(tape.value(fv.prediction).data());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
