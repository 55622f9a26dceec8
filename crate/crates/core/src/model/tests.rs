use super::*;
use crate::autodiff::finite_difference_check;
use crate::training::objective_on_tape;
use proptest::prelude::*;
use rand::Rng;

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], random_vec(rng, rows * cols)).unwrap()
}

fn random_layer(rng: &mut ChaCha8Rng, variant: Variant, e: usize, a: usize, alpha: f64) -> GraphAttentionLayer {
    let scoring = match variant {
        Variant::Gat => Scoring::Gat {
            a1: random_vec(rng, a),
            a2: random_vec(rng, a),
        },
        Variant::Gatv2 => Scoring::Gatv2 {
            w2: random_tensor(rng, a, e),
            b2: random_vec(rng, a),
            a: random_vec(rng, a),
        },
    };
    GraphAttentionLayer {
        w1: random_tensor(rng, a, e),
        b1: random_vec(rng, a),
        w: random_tensor(rng, e, e),
        b: random_vec(rng, e),
        scoring,
        alpha,
    }
}

fn small_config(n: usize, variant: Variant, layers: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        attn_dim: 2,
        hidden_dim: 4,
        head_hidden: 3,
        layers,
        ..ModelConfig::new(n, variant)
    }
}

fn random_window(rng: &mut ChaCha8Rng, n: usize, t: usize) -> MtsWindow {
    MtsWindow::new(n, t, (0..n * t).map(|_| rng.gen_range(-2.0..2.0)).collect(), 0.0).unwrap()
}

/// Model with every parameter drawn from U(-1, 1), biases included.
fn dense_random_model(config: ModelConfig, seed: u64) -> GarnnModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = GarnnModel::zeros(config).unwrap();
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    model
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn leaky(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Scalar-loop recomputation of one attention layer.
fn layer_oracle(layer: &GraphAttentionLayer, e: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = e.len();
    let q: Vec<Vec<f64>> = e.iter().map(|x| add(&matvec(&layer.w1, x), &layer.b1)).collect();
    let k: Vec<Vec<f64>> = match &layer.scoring {
        Scoring::Gat { .. } => q.clone(),
        Scoring::Gatv2 { w2, b2, .. } => e.iter().map(|x| add(&matvec(w2, x), b2)).collect(),
    };
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            scores[i * n + j] = match &layer.scoring {
                Scoring::Gat { a1, a2 } => {
                    let s: f64 = (0..q[i].len()).map(|c| a1[c] * q[i][c] + a2[c] * k[j][c]).sum();
                    leaky(s, layer.alpha)
                }
                Scoring::Gatv2 { a, .. } => (0..q[i].len()).map(|c| a[c] * leaky(q[i][c] + k[j][c], layer.alpha)).sum(),
            };
        }
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let row = &scores[i * n..(i + 1) * n];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
        for j in 0..n {
            weights[i * n + j] = (row[j] - m).exp() / z;
        }
    }
    let msgs: Vec<Vec<f64>> = e.iter().map(|x| add(&matvec(&layer.w, x), &layer.b)).collect();
    let out = (0..n)
        .map(|i| {
            let mut acc = vec![0.0; msgs[0].len()];
            for j in 0..n {
                for (a, m) in acc.iter_mut().zip(&msgs[j]) {
                    *a += weights[i * n + j] * m;
                }
            }
            acc
        })
        .collect();
    (out, scores, weights)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn embed_examples() {
    assert_eq!(embed_variable(0.0, &[0.3, -0.7], &[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    assert_eq!(embed_variable(1.0, &[1.0, -1.0], &[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    assert!(embed_variable(f64::NAN, &[1.0], &[0.0]).is_err());
    assert!(embed_variable(f64::INFINITY, &[1.0], &[0.0]).is_err());
    assert!(embed_variable(1.0, &[1.0, 2.0], &[0.0]).is_err());
}

#[test]
fn embed_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = rng.gen_range(-3.0..3.0);
        let w = random_vec(&mut rng, 5);
        let b = random_vec(&mut rng, 5);
        let e = embed_variable(x, &w, &b).unwrap();
        for i in 0..5 {
            let pre = w[i] * x + b[i];
            assert_eq!(e[i], if pre > 0.0 { pre } else { 0.0 });
        }
    }
}

#[test]
fn single_node_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in [Variant::Gat, Variant::Gatv2] {
        let layer = random_layer(&mut rng, variant, 3, 2, 0.2);
        let e = vec![random_vec(&mut rng, 3)];
        let (out, att) = layer.forward(&e).unwrap();
        assert_eq!(att.weights, vec![1.0]);
        assert!(close(&out[0], &add(&matvec(&layer.w, &e[0]), &layer.b), 1e-15));
    }
}

#[test]
fn identical_nodes_get_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [Variant::Gat, Variant::Gatv2] {
        let layer = random_layer(&mut rng, variant, 3, 2, 0.2);
        let x = random_vec(&mut rng, 3);
        let e = vec![x.clone(); 4];
        let (out, att) = layer.forward(&e).unwrap();
        assert!(att.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        let msg = add(&matvec(&layer.w, &x), &layer.b);
        for row in &out {
            assert!(close(row, &msg, 1e-14));
        }
    }
}

#[test]
fn layer_matches_scalar_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for variant in [Variant::Gat, Variant::Gatv2] {
        for alpha in [0.0, 0.2, 1.0] {
            let layer = random_layer(&mut rng, variant, 4, 3, alpha);
            let e: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 4)).collect();
            let (out, att) = layer.forward(&e).unwrap();
            let (o_out, o_scores, o_weights) = layer_oracle(&layer, &e);
            assert!(close(&att.scores, &o_scores, 1e-13), "{variant} scores");
            assert!(close(&att.weights, &o_weights, 1e-13), "{variant} weights");
            for (a, b) in out.iter().zip(&o_out) {
                assert!(close(a, b, 1e-13), "{variant} output");
            }
        }
    }
}

#[test]
fn empty_graph_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = random_layer(&mut rng, Variant::Gatv2, 3, 2, 0.2);
    assert!(matches!(layer.forward(&[]), Err(Error::Empty(_))));
    assert!(layer.forward(&[vec![1.0, 2.0]]).is_err());
}

#[test]
fn zero_model_predicts_head_bias() {
    for variant in [Variant::Gat, Variant::Gatv2] {
        let mut model = GarnnModel::zeros(small_config(3, variant, 2)).unwrap();
        model.params_mut().get_mut("head.b2").unwrap().data_mut()[0] = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_window(&mut rng, 3, 6);
        assert_eq!(model.forward(&w).unwrap().0, 0.7);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let model = GarnnModel::init(small_config(4, Variant::Gatv2, 2), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_window(&mut rng, 4, 5);
    let (a, ta) = model.forward(&w).unwrap();
    let (b, tb) = model.forward(&w).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ta, tb);
}

#[test]
fn batched_forward_matches_single_windows() {
    let model = dense_random_model(small_config(3, Variant::Gat, 2), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ws: Vec<MtsWindow> = (0..5).map(|_| random_window(&mut rng, 3, 4)).collect();
    let refs: Vec<&MtsWindow> = ws.iter().collect();
    let (preds, traces) = model.forward_batch(&refs).unwrap();
    for (i, w) in ws.iter().enumerate() {
        let (p, t) = model.forward(w).unwrap();
        assert!((p - preds[i]).abs() < 1e-13);
        assert!(close(&t.at(3, 1).weights, &traces[i].at(3, 1).weights, 1e-14));
    }
    assert_eq!(model.predict(&ws).unwrap().len(), 5);
}

#[test]
fn shape_mismatch_is_rejected() {
    let model = GarnnModel::init(small_config(3, Variant::Gat, 1), 0).unwrap();
    let w = MtsWindow::new(2, 4, vec![0.0; 8], 0.0).unwrap();
    assert!(model.forward(&w).is_err());
    let a = MtsWindow::new(3, 4, vec![0.0; 12], 0.0).unwrap();
    let b = MtsWindow::new(3, 5, vec![0.0; 15], 0.0).unwrap();
    assert!(model.forward_batch(&[&a, &b]).is_err());
    assert!(model.forward_batch(&[]).is_err());
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn one_variable_one_step_matches_hand_computation() {
    for variant in [Variant::Gat, Variant::Gatv2] {
        let config = small_config(1, variant, 1);
        let model = dense_random_model(config, 21);
        let x = 0.8;
        let w = MtsWindow::new(1, 1, vec![x], 0.0).unwrap();
        let p = |s: &str| model.params().get(s).unwrap();

        let e: Vec<f64> = (0..3)
            .map(|i| (p("embed.w").data()[i] * x + p("embed.b").data()[i]).max(0.0))
            .collect();
        // A single node attends only to itself.
        let node = add(&matvec(p("layer0.w"), &e), p("layer0.b").data());
        let gate = |g: &str, r: Option<&[f64]>| -> Vec<f64> {
            let wx = matvec(p(&format!("gru.w_{g}")), &node);
            let h0 = vec![0.0; 4];
            let hin: Vec<f64> = match r {
                Some(r) => r.iter().zip(&h0).map(|(a, b)| a * b).collect(),
                None => h0,
            };
            let uh = matvec(p(&format!("gru.u_{g}")), &hin);
            (0..4).map(|i| wx[i] + uh[i] + p(&format!("gru.b_{g}")).data()[i]).collect()
        };
        let z: Vec<f64> = gate("z", None).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate("r", None).into_iter().map(sigmoid).collect();
        let cand: Vec<f64> = gate("h", Some(&r)).into_iter().map(f64::tanh).collect();
        let h: Vec<f64> = (0..4).map(|i| z[i] * cand[i]).collect();
        let hidden: Vec<f64> = add(&matvec(p("head.w1"), &h), p("head.b1").data())
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let expected = matvec(p("head.w2"), &hidden)[0] + p("head.b2").data()[0];

        let (got, trace) = model.forward(&w).unwrap();
        assert!((got - expected).abs() < 1e-14, "{variant}: {got} vs {expected}");
        assert_eq!(trace.timesteps(), 1);
        assert_eq!(trace.layers(), 1);
    }
}

#[test]
fn gatv2_scores_can_be_dynamic() {
    // Receiver 0 prefers sender 0, receiver 1 prefers sender 1.
    let eye = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let layer = GraphAttentionLayer {
        w1: eye.clone(),
        b1: vec![0.0; 2],
        w: eye.clone(),
        b: vec![0.0; 2],
        scoring: Scoring::Gatv2 {
            w2: eye,
            b2: vec![0.0; 2],
            a: vec![1.0, 0.5],
        },
        alpha: 0.0,
    };
    let (_, att) = layer.forward(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
    assert!(att.score(0, 0) > att.score(0, 1));
    assert!(att.score(1, 1) > att.score(1, 0));
}

#[test]
fn gat_raw_scores_rank_senders_identically() {
    // LeakyReLU is monotone, so GAT's post-activation order is static too.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let layer = random_layer(&mut rng, Variant::Gat, 3, 3, 0.2);
        let e: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3)).collect();
        let (_, att) = layer.forward(&e).unwrap();
        let best: Vec<usize> = (0..4)
            .map(|r| (0..4).max_by(|&a, &b| att.score(r, a).total_cmp(&att.score(r, b))).unwrap())
            .collect();
        assert!(best.iter().all(|&b| b == best[0]));
    }
}

/// Reorders variables: input rows, embedding rows, and GRU input column blocks.
fn permute_model(model: &GarnnModel, perm: &[usize]) -> GarnnModel {
    let c = model.config().clone();
    let e = c.embed_dim;
    let mut out = model.clone();
    for name in ["embed.w", "embed.b"] {
        let src = model.params().get(name).unwrap().data().to_vec();
        let dst = out.params_mut().get_mut(name).unwrap().data_mut();
        for (new, &old) in perm.iter().enumerate() {
            dst[new * e..(new + 1) * e].copy_from_slice(&src[old * e..(old + 1) * e]);
        }
    }
    let width = c.n_vars * e;
    for g in ["z", "r", "h"] {
        let name = format!("gru.w_{g}");
        let src = model.params().get(&name).unwrap().data().to_vec();
        let dst = out.params_mut().get_mut(&name).unwrap().data_mut();
        for row in 0..c.hidden_dim {
            for (new, &old) in perm.iter().enumerate() {
                let (d, s) = (row * width + new * e, row * width + old * e);
                dst[d..d + e].copy_from_slice(&src[s..s + e]);
            }
        }
    }
    out
}

#[test]
fn permuting_variables_preserves_the_prediction() {
    let perm = [2, 0, 3, 1];
    for variant in [Variant::Gat, Variant::Gatv2] {
        let model = dense_random_model(small_config(4, variant, 2), 31);
        let permuted = permute_model(&model, &perm);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random_window(&mut rng, 4, 5);
        let mut values = Vec::new();
        for &old in &perm {
            values.extend_from_slice(w.row(old));
        }
        let pw = MtsWindow::new(4, 5, values, 0.0).unwrap();
        let (a, ta) = model.forward(&w).unwrap();
        let (b, tb) = permuted.forward(&pw).unwrap();
        assert!((a - b).abs() < 1e-12, "{variant}: {a} vs {b}");
        for (new, &old) in perm.iter().enumerate() {
            assert!(close(ta.at(4, 1).key(old), tb.at(4, 1).key(new), 1e-12));
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for variant in [Variant::Gat, Variant::Gatv2] {
        let config = small_config(3, variant, 2);
        let model = GarnnModel::init(config.clone(), 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ws: Vec<MtsWindow> = (0..2).map(|_| random_window(&mut rng, 3, 4)).collect();
        let refs: Vec<&MtsWindow> = ws.iter().collect();
        let y = [0.3, -0.4];
        let report = finite_difference_check(
            |tape, bound| {
                let fv = build_forward(&config, tape, bound, &refs)?;
                objective_on_tape(tape, fv.prediction, &y, bound, 0.0)
            },
            model.params(),
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{variant}: {:?}", report.worst());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = dense_random_model(small_config(3, Variant::Gatv2, 2), 51);
    let text = Checkpoint::from_model(&model, None).to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap().to_model().unwrap();
    for (name, t) in model.params().iter() {
        let u = back.params().get(name).unwrap();
        assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
    }
    assert_eq!(back.config(), model.config());
}

#[test]
fn checkpoint_rejects_wrong_shapes() {
    let model = GarnnModel::init(small_config(2, Variant::Gat, 1), 0).unwrap();
    let mut ck = Checkpoint::from_model(&model, None);
    ck.params.get_mut("embed.w").unwrap().shape = vec![3, 2];
    assert!(ck.to_model().is_err());
    let mut ck = Checkpoint::from_model(&model, None);
    ck.params.remove("head.b2");
    assert!(ck.to_model().is_err());
    assert!(Checkpoint::from_json("{\"format\":\"other\"}").is_err());
}

#[test]
fn parameter_sharing_follows_the_variant() {
    let names = |v| -> Vec<String> { small_config(2, v, 1).parameter_layout().into_iter().map(|p| p.0).collect() };
    let gat = names(Variant::Gat);
    assert!(gat.contains(&"layer0.a1".to_string()) && !gat.contains(&"layer0.w2".to_string()));
    let v2 = names(Variant::Gatv2);
    assert!(v2.contains(&"layer0.w2".to_string()) && v2.contains(&"layer0.a".to_string()));
    assert!(!v2.contains(&"layer0.a1".to_string()));
    let two = small_config(2, Variant::Gat, 2).parameter_layout();
    assert!(two.iter().any(|p| p.0 == "layer1.w1"));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ModelConfig { layers: 0, ..ModelConfig::new(3, Variant::Gat) }.validate().is_err());
    assert!(ModelConfig { alpha: 1.5, ..ModelConfig::new(3, Variant::Gat) }.validate().is_err());
    assert!(GarnnModel::init(ModelConfig::new(0, Variant::Gatv2), 0).is_err());
    let mut m = GarnnModel::init(ModelConfig::new(2, Variant::Gatv2), 0).unwrap();
    assert!(m.set_alpha(-0.1).is_err());
    m.set_alpha(0.5).unwrap();
    assert_eq!(m.layer(0).unwrap().alpha, 0.5);
}

#[test]
fn attention_rows_are_distributions() {
    let model = dense_random_model(small_config(5, Variant::Gatv2, 2), 61);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (before, _) = softmax_row_audit();
    let ws: Vec<MtsWindow> = (0..3).map(|_| random_window(&mut rng, 5, 6)).collect();
    let refs: Vec<&MtsWindow> = ws.iter().collect();
    let (_, traces) = model.forward_batch(&refs).unwrap();
    for trace in &traces {
        for step in &trace.steps {
            for att in step {
                assert!(att.max_row_sum_error() <= SOFTMAX_ROW_TOL);
                assert!(att.weights.iter().all(|&w| w >= 0.0));
            }
        }
    }
    let (after, _) = softmax_row_audit();
    assert!(after - before >= 3 * 6 * 2 * 5);
}

proptest! {
    #[test]
    fn layer_agrees_with_oracle_for_any_input(seed in 0u64..500, n in 1usize..5, alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variant = if seed % 2 == 0 { Variant::Gat } else { Variant::Gatv2 };
        let layer = random_layer(&mut rng, variant, 3, 2, alpha);
        let e: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, 3)).collect();
        let (out, att) = layer.forward(&e).unwrap();
        let (o_out, _, o_weights) = layer_oracle(&layer, &e);
        prop_assert!(close(&att.weights, &o_weights, 1e-13));
        for (a, b) in out.iter().zip(&o_out) {
            prop_assert!(close(a, b, 1e-13));
        }
    }
}
