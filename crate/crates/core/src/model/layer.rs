//! Graph attention over a complete variable graph (self-loops included).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `LeakyReLU(a1ᵀq + a2ᵀk)`, shared query/key transform.
    Gat,
    /// `aᵀ LeakyReLU(q + k)`, separate query/key transforms.
    Gatv2,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(Variant::Gat),
            "gatv2" => Ok(Variant::Gatv2),
            other => Err(Error::Config(format!("unknown variant `{other}` (gat|gatv2)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Gat => "gat",
            Variant::Gatv2 => "gatv2",
        })
    }
}

pub(crate) fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// GAT score `LeakyReLU(a1ᵀq + a2ᵀk)`.
pub fn score_gat(q: &[f64], k: &[f64], a1: &[f64], a2: &[f64], alpha: f64) -> Result<f64> {
    if q.len() != k.len() || a1.len() != q.len() || a2.len() != q.len() {
        return Err(Error::shape("score_gat", &[&[q.len()], &[k.len()], &[a1.len()], &[a2.len()]]));
    }
    Ok(leaky_relu(dot(a1, q) + dot(a2, k), alpha))
}

/// GATv2 score `aᵀ LeakyReLU(q + k)`, activation applied elementwise.
pub fn score_gatv2(q: &[f64], k: &[f64], a: &[f64], alpha: f64) -> Result<f64> {
    if q.len() != k.len() || a.len() != q.len() {
        return Err(Error::shape("score_gatv2", &[&[q.len()], &[k.len()], &[a.len()]]));
    }
    Ok(a.iter().zip(q.iter().zip(k)).map(|(w, (x, y))| w * leaky_relu(x + y, alpha)).sum())
}

/// Variant-specific scoring parameters. GAT shares the query transform for
/// keys; GATv2 shares the attention vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Scoring {
    Gat { a1: Vec<f64>, a2: Vec<f64> },
    Gatv2 { w2: Tensor, b2: Vec<f64>, a: Vec<f64> },
}

/// Parameters of one attention layer, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphAttentionLayer {
    /// Query transform `[A, E]`.
    pub w1: Tensor,
    pub b1: Vec<f64>,
    /// Message transform `[E, E]`.
    pub w: Tensor,
    pub b: Vec<f64>,
    pub scoring: Scoring,
    pub alpha: f64,
}

impl GraphAttentionLayer {
    pub fn variant(&self) -> Variant {
        match self.scoring {
            Scoring::Gat { .. } => Variant::Gat,
            Scoring::Gatv2 { .. } => Variant::Gatv2,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn attn_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn key_weight(&self) -> &Tensor {
        match &self.scoring {
            Scoring::Gat { .. } => &self.w1,
            Scoring::Gatv2 { w2, .. } => w2,
        }
    }

    pub fn key_bias(&self) -> &[f64] {
        match &self.scoring {
            Scoring::Gat { .. } => &self.b1,
            Scoring::Gatv2 { b2, .. } => b2,
        }
    }

    /// Attention vector applied to queries (`a1`, or the shared `a`).
    pub fn query_attention(&self) -> &[f64] {
        match &self.scoring {
            Scoring::Gat { a1, .. } => a1,
            Scoring::Gatv2 { a, .. } => a,
        }
    }

    /// Attention vector applied to keys (`a2`, or the shared `a`).
    pub fn key_attention(&self) -> &[f64] {
        match &self.scoring {
            Scoring::Gat { a2, .. } => a2,
            Scoring::Gatv2 { a, .. } => a,
        }
    }

    /// One layer over a single graph of `N` node representations.
    pub fn forward(&self, e: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, TimestepAttention)> {
        let n = e.len();
        if n == 0 {
            return Err(Error::Empty("graph_layer_forward"));
        }
        let ed = self.embed_dim();
        if e.iter().any(|v| v.len() != ed) {
            return Err(Error::shape("graph_layer_forward", &[&[n, e[0].len()], &[ed]]));
        }
        let mut tape = Tape::new();
        let vars = LayerVars::constants(&mut tape, self);
        let input = tape.constant(Tensor::new(vec![1, n, ed], e.concat())?);
        let out = layer_on_tape(&mut tape, &vars, input, self.variant(), self.alpha)?;
        let rows = tape
            .value(out.output)
            .data()
            .chunks(ed)
            .map(<[f64]>::to_vec)
            .collect();
        let att = TimestepAttention::from_tape(&tape, &out, 0, n, self.attn_dim());
        Ok((rows, att))
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub a1: Var,
    pub a2: Var,
    pub w: Var,
    pub b: Var,
}

impl LayerVars {
    fn constants(tape: &mut Tape, layer: &GraphAttentionLayer) -> Self {
        let w1 = tape.constant(layer.w1.clone());
        let b1 = tape.constant(Tensor::vector(layer.b1.clone()));
        let w = tape.constant(layer.w.clone());
        let b = tape.constant(Tensor::vector(layer.b.clone()));
        match &layer.scoring {
            Scoring::Gat { a1, a2 } => LayerVars {
                w1,
                b1,
                w2: w1,
                b2: b1,
                a1: tape.constant(Tensor::vector(a1.clone())),
                a2: tape.constant(Tensor::vector(a2.clone())),
                w,
                b,
            },
            Scoring::Gatv2 { w2, b2, a } => {
                let a = tape.constant(Tensor::vector(a.clone()));
                LayerVars {
                    w1,
                    b1,
                    w2: tape.constant(w2.clone()),
                    b2: tape.constant(Tensor::vector(b2.clone())),
                    a1: a,
                    a2: a,
                    w,
                    b,
                }
            }
        }
    }
}

/// Tape handles produced by one layer over `G` graphs of `N` nodes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOutput {
    /// `[G, N, E]`.
    pub output: Var,
    /// `[G·N, A]`.
    pub queries: Var,
    /// `[G·N, A]`.
    pub keys: Var,
    /// GAT: `[G, N, N]` scalars `a1ᵀq + a2ᵀk`. GATv2 pre-activations
    /// `q + k` are rebuilt from `queries` and `keys` on demand.
    pub preact: Option<Var>,
    /// `[G, N, N]`, post-LeakyReLU, pre-softmax.
    pub scores: Var,
    /// `[G, N, N]`, softmax over senders.
    pub weights: Var,
}

/// Runs one layer on `e: [G, N, E]`.
pub(crate) fn layer_on_tape(tape: &mut Tape, p: &LayerVars, e: Var, variant: Variant, alpha: f64) -> Result<LayerOutput> {
    let s = tape.shape(e).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("graph_layer", &[&s]));
    }
    let (g, n, ed) = (s[0], s[1], s[2]);
    if n == 0 {
        return Err(Error::Empty("graph_layer_forward"));
    }
    let flat = tape.reshape(e, &[g * n, ed])?;
    let q = tape.matmul_nt(flat, p.w1)?;
    let queries = tape.add_bias(q, p.b1)?;
    let keys = match variant {
        Variant::Gat => queries,
        Variant::Gatv2 => {
            let k = tape.matmul_nt(flat, p.w2)?;
            tape.add_bias(k, p.b2)?
        }
    };
    let a = tape.shape(queries)[1];
    let (preact, scores) = match variant {
        Variant::Gat => {
            let sq = tape.matmul(queries, p.a1)?;
            let sk = tape.matmul(keys, p.a2)?;
            let sq = tape.reshape(sq, &[g, n, 1])?;
            let sk = tape.reshape(sk, &[g, n, 1])?;
            let pre = tape.pairwise_add(sq, sk)?;
            let pre = tape.reshape(pre, &[g, n, n])?;
            (Some(pre), tape.leaky_relu(pre, alpha)?)
        }
        Variant::Gatv2 => {
            let q3 = tape.reshape(queries, &[g, n, a])?;
            let k3 = tape.reshape(keys, &[g, n, a])?;
            (None, tape.pairwise_leaky_dot(q3, k3, p.a2, alpha)?)
        }
    };
    let weights = tape.softmax(scores)?;
    super::record_softmax_rows(tape.value(weights).data(), n);
    let msg = tape.matmul_nt(flat, p.w)?;
    let msg = tape.add_bias(msg, p.b)?;
    let msg = tape.reshape(msg, &[g, n, ed])?;
    let output = tape.batch_matmul(weights, msg)?;
    Ok(LayerOutput {
        output,
        queries,
        keys,
        preact,
        scores,
        weights,
    })
}

/// Pre-LeakyReLU quantities of one graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Preactivation {
    /// GAT: `N × N` scalars `a1ᵀqⁿ + a2ᵀkʲ`.
    Scalar(Vec<f64>),
    /// GATv2: `N × N` vectors `mⁿʲ = qⁿ + kʲ`, each of length `A`.
    Vector { dim: usize, values: Vec<f64> },
    /// Not retained.
    Missing,
}

/// Attention record of one layer at one timestep. Row index = receiver `n`,
/// column index = sender `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepAttention {
    pub n_vars: usize,
    pub attn_dim: usize,
    /// `N × A`.
    pub queries: Vec<f64>,
    /// `N × A`.
    pub keys: Vec<f64>,
    pub preact: Preactivation,
    /// `N × N`, post-LeakyReLU, pre-softmax.
    pub scores: Vec<f64>,
    /// `N × N`, rows sum to 1.
    pub weights: Vec<f64>,
}

impl TimestepAttention {
    pub(crate) fn from_tape(tape: &Tape, out: &LayerOutput, graph: usize, n: usize, a: usize) -> Self {
        let nn = n * n;
        let slice = |v: Var, width: usize| tape.value(v).data()[graph * width..(graph + 1) * width].to_vec();
        let queries = slice(out.queries, n * a);
        let keys = slice(out.keys, n * a);
        let preact = match out.preact {
            Some(v) => Preactivation::Scalar(slice(v, nn)),
            None => {
                let mut values = Vec::with_capacity(nn * a);
                for i in 0..n {
                    for j in 0..n {
                        let (q, k) = (&queries[i * a..(i + 1) * a], &keys[j * a..(j + 1) * a]);
                        values.extend(q.iter().zip(k).map(|(x, y)| x + y));
                    }
                }
                Preactivation::Vector { dim: a, values }
            }
        };
        TimestepAttention {
            n_vars: n,
            attn_dim: a,
            queries,
            keys,
            preact,
            scores: slice(out.scores, nn),
            weights: slice(out.weights, nn),
        }
    }

    pub fn score(&self, receiver: usize, sender: usize) -> f64 {
        self.scores[receiver * self.n_vars + sender]
    }

    pub fn weight(&self, receiver: usize, sender: usize) -> f64 {
        self.weights[receiver * self.n_vars + sender]
    }

    pub fn key(&self, var: usize) -> &[f64] {
        &self.keys[var * self.attn_dim..(var + 1) * self.attn_dim]
    }

    pub fn query(&self, var: usize) -> &[f64] {
        &self.queries[var * self.attn_dim..(var + 1) * self.attn_dim]
    }

    /// Largest deviation of a weight row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.weights
            .chunks(self.n_vars)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gat_score_examples() {
        assert_eq!(score_gat(&[3.0, 4.0], &[5.0, 6.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), 9.0);
        assert_eq!(score_gat(&[3.0, 4.0], &[5.0, 6.0], &[0.0, 0.0], &[0.0, 0.0], 0.2).unwrap(), 0.0);
        let s = score_gat(&[-3.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], 0.1).unwrap();
        assert!((s + 0.2).abs() < 1e-15);
    }

    #[test]
    fn gatv2_score_examples() {
        let s = score_gatv2(&[1.0, -2.0], &[0.5, -1.0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(s, 0.0);
        let (q, k, a) = ([0.3, -1.1, 2.0], [-0.7, 0.2, 0.4], [1.5, -0.5, 0.25]);
        let linear: f64 = (0..3).map(|i| a[i] * (q[i] + k[i])).sum();
        assert_eq!(score_gatv2(&q, &k, &a, 1.0).unwrap(), linear);
        assert!(score_gatv2(&q, &k, &a[..2], 1.0).is_err());
    }

    #[test]
    fn gatv2_score_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let k: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let alpha = rng.gen_range(0.0..1.0);
            let mut oracle = 0.0;
            for i in 0..4 {
                let m = q[i] + k[i];
                oracle += a[i] * if m > 0.0 { m } else { alpha * m };
            }
            assert!((score_gatv2(&q, &k, &a, alpha).unwrap() - oracle).abs() < 1e-14);
        }
    }
}
