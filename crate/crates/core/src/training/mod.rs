//! Squared-error objective with L2 penalty, Adam, and a fit loop that keeps
//! the epoch with the lowest validation RMSE.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, GradientMap, ParamSet, Tape, Tensor, Var};
use crate::data::{MtsWindow, Normalizer};
use crate::error::{Error, Result};
use crate::model::{build_forward, GarnnModel, ModelConfig};

/// Learning rates searched by default.
pub const GRID_LEARNING_RATES: [f64; 3] = [1e-3, 1e-4, 1e-5];
/// L2 coefficients searched by default.
pub const GRID_LAMBDAS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Seeds per grid point.
pub const GRID_SEEDS: [u64; 4] = [0, 1, 2, 3];

/// Every `(learning_rate, lambda)` pair of the default grid.
pub fn default_grid() -> Vec<(f64, f64)> {
    GRID_LEARNING_RATES
        .iter()
        .flat_map(|&lr| GRID_LAMBDAS.iter().map(move |&l| (lr, l)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 coefficient `λ` in `(λ/2)‖θ‖²`.
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lambda: 1e-5,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: [&str; 9] = [
    "learning_rate",
    "lambda",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "beta1",
    "beta2",
    "epsilon",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("need 0 <= beta < 1 and epsilon > 0".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting; `Ok(false)` when the key is not a
    /// training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in parse_key_values(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "learning_rate = {}\nlambda = {}\nbatch_size = {}\nmax_epochs = {}\npatience = {}\nseed = {}\nbeta1 = {}\nbeta2 = {}\nepsilon = {}\n",
            self.learning_rate,
            self.lambda,
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.seed,
            self.beta1,
            self.beta2,
            self.epsilon
        )
    }
}

/// Splits flat `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse {
                row: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `(1/I)Σ(ŷ−y)² + (λ/2)‖θ‖²`.
pub fn objective(predictions: &[f64], targets: &[f64], params: &ParamSet, lambda: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("objective"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape("objective", &[&[predictions.len()], &[targets.len()]]));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse + 0.5 * lambda * params.sum_squares())
}

/// The objective on a tape: `prediction` is `[I, 1]`, every bound parameter
/// enters the penalty.
pub fn objective_on_tape(tape: &mut Tape, prediction: Var, targets: &[f64], params: &BoundParams, lambda: f64) -> Result<Var> {
    let i = targets.len();
    if i == 0 {
        return Err(Error::Empty("objective"));
    }
    let y = tape.constant(Tensor::new(vec![i, 1], targets.to_vec())?);
    let r = tape.sub(prediction, y)?;
    let sq = tape.square(r)?;
    let data = tape.mean(sq)?;
    if lambda == 0.0 {
        return Ok(data);
    }
    let mut norms = Vec::new();
    for (_, &v) in params.vars() {
        let s = tape.square(v)?;
        let s = tape.sum(s)?;
        norms.push(tape.reshape(s, &[1])?);
    }
    let all = tape.concat(&norms)?;
    let total = tape.sum(all)?;
    let penalty = tape.scale(total, 0.5 * lambda)?;
    tape.add(data, penalty)
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientMap) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", &[p.shape(), g.shape()]));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Objective value and gradients for one mini-batch.
pub fn batch_gradients(model: &GarnnModel, windows: &[&MtsWindow], lambda: f64) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let fv = build_forward(model.config(), &mut tape, &bound, windows)?;
    let targets: Vec<f64> = windows.iter().map(|w| w.target).collect();
    let loss = objective_on_tape(&mut tape, fv.prediction, &targets, &bound, lambda)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, model.params().collect_gradients(&bound, &mut grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's mini-batches.
    pub train_loss: f64,
    /// Validation RMSE in normalised target units.
    pub val_rmse: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the selected epoch.
    pub model: GarnnModel,
    pub curve: Vec<EpochRecord>,
    /// Index into `curve` of the selected epoch.
    pub best_epoch: usize,
    pub seed: u64,
}

impl FitResult {
    pub fn best(&self) -> &EpochRecord {
        &self.curve[self.best_epoch]
    }

    /// Loss curve as CSV `epoch,train_loss,val_rmse`.
    pub fn write_curve<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_rmse"])?;
        for r in &self.curve {
            w.write_record(&[r.epoch.to_string(), r.train_loss.to_string(), r.val_rmse.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<loss curve>", e))?;
        Ok(())
    }
}

fn check_windows(op: &'static str, windows: &[MtsWindow], n_vars: usize) -> Result<()> {
    let first = windows.first().ok_or(Error::Empty(op))?;
    for w in windows {
        if w.n_vars() != n_vars || w.timesteps() != first.timesteps() {
            return Err(Error::shape(op, &[&[w.n_vars(), w.timesteps()], &[n_vars, first.timesteps()]]));
        }
    }
    Ok(())
}

fn rmse_model_units(model: &GarnnModel, windows: &[MtsWindow]) -> Result<f64> {
    let preds = model.predict(windows)?;
    let sse: f64 = preds.iter().zip(windows).map(|(p, w)| (p - w.target).powi(2)).sum();
    Ok((sse / windows.len() as f64).sqrt())
}

/// Initialises a model from `model_config` with the training seed and fits it.
pub fn fit(train: &[MtsWindow], validation: &[MtsWindow], model_config: ModelConfig, config: &TrainConfig) -> Result<FitResult> {
    let model = GarnnModel::init(model_config, config.seed)?;
    fit_model(model, train, validation, config)
}

/// Mini-batch Adam on the objective from a given starting model.
///
/// Batches are drawn from a per-epoch shuffle seeded by `config.seed`. After
/// each epoch the validation RMSE is recorded; the best epoch's parameters
/// are kept and training stops after `patience` epochs without a strict
/// improvement. A non-finite loss aborts with the epoch index.
pub fn fit_model(mut model: GarnnModel, train: &[MtsWindow], validation: &[MtsWindow], config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    let n = model.config().n_vars;
    check_windows("fit_train", train, n)?;
    check_windows("fit_validation", validation, n)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(config);
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, GarnnModel)> = None;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&MtsWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = match batch_gradients(&model, &batch, config.lambda) {
                Ok(x) => x,
                Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            adam.step(model.params_mut(), &grads)?;
            total += loss;
            batches += 1;
        }
        let val_rmse = match rmse_model_units(&model, validation) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch }),
            Err(e) => return Err(e),
        };
        curve.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_rmse,
        });
        let improved = best.as_ref().map_or(true, |(_, b, _)| val_rmse < *b);
        if improved {
            best = Some((epoch, val_rmse, model.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.0) >= config.patience {
            break;
        }
    }
    let (best_epoch, _, model) = best.ok_or(Error::Empty("fit"))?;
    Ok(FitResult {
        model,
        curve,
        best_epoch,
        seed: config.seed,
    })
}

/// Predictions in the target's original units.
pub fn predict_batch(model: &GarnnModel, windows: &[MtsWindow], normalizer: &Normalizer) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    if normalizer.mean.len() != model.config().n_vars {
        return Err(Error::shape(
            "predict_batch",
            &[&[normalizer.mean.len()], &[model.config().n_vars]],
        ));
    }
    check_windows("predict_batch", windows, model.config().n_vars)?;
    Ok(model
        .predict(windows)?
        .into_iter()
        .map(|z| normalizer.denormalize_target(z))
        .collect())
}

/// Targets of `windows` in original units.
pub fn targets(windows: &[MtsWindow], normalizer: &Normalizer) -> Vec<f64> {
    windows.iter().map(|w| normalizer.denormalize_target(w.target)).collect()
}

/// Persistence baseline `ŷ_{T+H} = y_T` in original units.
pub fn persistence(windows: &[MtsWindow], normalizer: &Normalizer) -> Vec<f64> {
    windows
        .iter()
        .map(|w| normalizer.denormalize_target(w.get(0, w.timesteps() - 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::model::Variant;
    use rand::Rng;

    fn small_config(n: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            attn_dim: 3,
            hidden_dim: 5,
            head_hidden: 4,
            ..ModelConfig::new(n, variant)
        }
    }

    fn random_windows(count: usize, n: usize, t: usize, seed: u64) -> Vec<MtsWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let v: Vec<f64> = (0..n * t).map(|_| rng.gen_range(-1.5..1.5)).collect();
                MtsWindow::new(n, t, v, rng.gen_range(-1.0..1.0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn objective_examples() {
        let empty = ParamSet::new();
        assert_eq!(objective(&[1.0, 2.0], &[1.0, 2.0], &empty, 0.0).unwrap(), 0.0);
        assert_eq!(objective(&[3.0], &[1.0], &empty, 0.0).unwrap(), 4.0);
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::vector(vec![1.0, 1.0, 1.0]));
        assert_eq!(objective(&[3.0], &[1.0], &p, 2.0).unwrap(), 7.0);
        assert!(matches!(objective(&[], &[], &p, 0.0), Err(Error::Empty(_))));
        assert!(objective(&[1.0], &[1.0, 2.0], &p, 0.0).is_err());
    }

    #[test]
    fn tape_objective_matches_scalar_objective() {
        let model = GarnnModel::init(small_config(2, Variant::Gatv2), 4).unwrap();
        let ws = random_windows(3, 2, 3, 1);
        let refs: Vec<&MtsWindow> = ws.iter().collect();
        let (loss, _) = batch_gradients(&model, &refs, 0.3).unwrap();
        let preds = model.predict(&ws).unwrap();
        let y: Vec<f64> = ws.iter().map(|w| w.target).collect();
        let direct = objective(&preds, &y, model.params(), 0.3).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn objective_gradient_includes_penalty() {
        for variant in [Variant::Gat, Variant::Gatv2] {
            let model = GarnnModel::init(small_config(2, variant), 9).unwrap();
            let ws = random_windows(2, 2, 3, 2);
            let refs: Vec<&MtsWindow> = ws.iter().collect();
            let y: Vec<f64> = ws.iter().map(|w| w.target).collect();
            let cfg = model.config().clone();
            let report = finite_difference_check(
                |tape, bound| {
                    let fv = build_forward(&cfg, tape, bound, &refs)?;
                    objective_on_tape(tape, fv.prediction, &y, bound, 0.5)
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
    fn zero_learning_rate_is_a_no_op() {
        let mut model = GarnnModel::init(small_config(2, Variant::Gat), 1).unwrap();
        let before = model.params().clone();
        let ws = random_windows(4, 2, 3, 3);
        let refs: Vec<&MtsWindow> = ws.iter().collect();
        let (_, grads) = batch_gradients(&model, &refs, 1e-3).unwrap();
        let mut adam = Adam::new(&TrainConfig::default());
        adam.learning_rate = 0.0;
        adam.step(model.params_mut(), &grads).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.params().iter()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(vec![1.0, -2.0]));
        let mut g = GradientMap::new();
        g.insert("x".into(), Tensor::vector(vec![0.5, -3.0]));
        let mut adam = Adam::new(&TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        });
        adam.step(&mut p, &g).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-7);
        assert!((x[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn overfits_single_window() {
        let mut cfg = small_config(2, Variant::Gatv2);
        cfg.hidden_dim = 8;
        let ws = random_windows(1, 2, 4, 5);
        let tc = TrainConfig {
            learning_rate: 1e-2,
            lambda: 0.0,
            batch_size: 1,
            max_epochs: 400,
            patience: 400,
            ..TrainConfig::default()
        };
        let fit = fit(&ws, &ws, cfg, &tc).unwrap();
        let last = fit.curve.last().unwrap().train_loss;
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn fixed_seed_is_deterministic_and_selects_best() {
        let cfg = small_config(3, Variant::Gat);
        let train = random_windows(40, 3, 4, 6);
        let val = random_windows(10, 3, 4, 7);
        let tc = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            max_epochs: 6,
            patience: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = fit(&train, &val, cfg.clone(), &tc).unwrap();
        let b = fit(&train, &val, cfg, &tc).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        let best = a.best().val_rmse;
        assert!(a.curve.iter().all(|r| best <= r.val_rmse));
        let mut buf = Vec::new();
        a.write_curve(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_rmse\n"));
        assert_eq!(text.lines().count(), a.curve.len() + 1);
    }

    #[test]
    fn divergence_reports_epoch() {
        let mut model = GarnnModel::init(small_config(2, Variant::Gat), 0).unwrap();
        model.params_mut().get_mut("head.b2").unwrap().data_mut()[0] = 1e200;
        let ws = random_windows(4, 2, 3, 1);
        let err = fit_model(model, &ws, &ws, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 }), "{err:?}");
    }

    #[test]
    fn predict_batch_denormalises() {
        let model = GarnnModel::init(small_config(2, Variant::Gatv2), 2).unwrap();
        let ws = random_windows(5, 2, 3, 8);
        let names = vec!["g".to_string(), "x".to_string()];
        assert!(predict_batch(&model, &[], &Normalizer::identity(names.clone())).unwrap().is_empty());
        let raw = model.predict(&ws).unwrap();
        assert_eq!(predict_batch(&model, &ws, &Normalizer::identity(names.clone())).unwrap(), raw);
        let norm = Normalizer {
            variables: names,
            mean: vec![140.0, 3.0],
            std: vec![40.0, 2.0],
        };
        let out = predict_batch(&model, &ws, &norm).unwrap();
        for (o, r) in out.iter().zip(&raw) {
            assert!((o - (r * 40.0 + 140.0)).abs() < 1e-12);
        }
        let wrong = random_windows(2, 3, 3, 8);
        assert!(predict_batch(&model, &wrong, &norm).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            seed: 3,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::parse("learning_rate = 0\n").is_err());
        assert!(TrainConfig::parse("patience = 0\n").is_err());
        assert!(TrainConfig::parse("bogus = 1\n").is_err());
        assert!(matches!(TrainConfig::parse("lambda 3\n"), Err(Error::Parse { row: 1, .. })));
        let c = TrainConfig::parse("# comment\nbatch_size = 32  # inline\n").unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(default_grid().len(), 9);
    }
}
