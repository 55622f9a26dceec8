use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use garnn::data::{generate_synthetic, save_csv, write_event_masks, DatasetMetadata, MtsWindow};
use garnn::interpret::{
    dataset_importance, explain, feature_map, layers_of, ranking_table, render_heatmap_svg, static_ranking_sweep,
    theorem3_gap, write_importance_csv, write_ranking_csv, ImportanceMatrix, GAP_SLACK,
};
use garnn::metrics::{MetricReport, MetricSet, PenaltyConfig};
use garnn::model::{Checkpoint, GarnnModel, Variant, Windowing};
use garnn::training::{fit, persistence, predict_batch, targets};
use garnn::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{self, Prepared, SplitName, DATASET_FILE, EVENTS_FILE, METADATA_FILE};
use crate::manifest::Outputs;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Largest gap allowed when the activation is the identity.
const IDENTITY_GAP_TOL: f64 = 1e-12;

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn windowing(cfg: &RunConfig) -> Windowing {
    Windowing {
        history: cfg.data.history,
        horizon: cfg.data.horizon,
    }
}

pub fn simulate(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<()> {
    let record = generate_synthetic(seed, cfg.data.days, cfg.data.interval_minutes, &cfg.synthetic)?;
    save_csv(&record, &out.path(DATASET_FILE))?;
    out.record(DATASET_FILE);
    out.write(EVENTS_FILE, csv_bytes(|b| write_event_masks(&record, b))?)?;
    let mut meta = DatasetMetadata::for_record(&record, cfg.data.split);
    meta.seed = Some(seed);
    meta.days = Some(cfg.data.days);
    meta.generator = Some(cfg.synthetic.clone());
    meta.save(&out.path(METADATA_FILE))?;
    out.record(METADATA_FILE);
    println!(
        "simulated {} rows x {} variables ({} meal events)",
        record.len(),
        record.n_vars(),
        record.event_masks.get("meal").map_or(0, |m| m.iter().filter(|&&b| b).count())
    );
    Ok(())
}

fn load_record(cfg: &RunConfig, path: &Path) -> Result<dataset::Dataset> {
    let mut ds = dataset::load(path)?;
    ds.record = dataset::with_timestamp_channel(ds.record, cfg.data.encode_timestamp)?;
    Ok(ds)
}

fn nonempty<'a>(what: &'static str, w: &'a [MtsWindow]) -> Result<&'a [MtsWindow]> {
    if w.is_empty() {
        return Err(Error::Empty(what));
    }
    Ok(w)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &mut Outputs) -> Result<()> {
    let ds = load_record(cfg, data)?;
    let shape = windowing(cfg);
    let prep = dataset::prepare(&ds.record, &cfg.data.split, shape, None)?;
    let train = nonempty("training windows", &prep.train)?;
    let val = nonempty("validation windows", &prep.validation)?;
    let model_config = cfg.model.model_config(ds.record.n_vars());
    let result = fit(train, val, model_config, &cfg.train)?;

    let mut ck = Checkpoint::from_model(&result.model, Some(prep.normalizer.clone()));
    ck.windowing = Some(shape);
    ck.seed = Some(cfg.train.seed);
    out.write(CHECKPOINT_FILE, ck.to_json()?)?;
    out.write("loss_curve.csv", csv_bytes(|b| result.write_curve(b))?)?;
    let best = result.best();
    println!(
        "trained {} epochs; best epoch {} (validation RMSE {:.4}, normalised units)",
        result.curve.len(),
        best.epoch,
        best.val_rmse
    );
    Ok(())
}

struct LoadedModel {
    model: GarnnModel,
    checkpoint: Checkpoint,
    shape: Windowing,
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<LoadedModel> {
    let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    let checkpoint = Checkpoint::load(&path)?;
    let mut model = checkpoint.to_model()?;
    if let Some(alpha) = cfg.alpha_override {
        model.set_alpha(alpha)?;
    }
    let shape = checkpoint.windowing.unwrap_or_else(|| windowing(cfg));
    Ok(LoadedModel { model, checkpoint, shape })
}

fn prepared_for(cfg: &RunConfig, record: &garnn::data::MtsRecord, m: &LoadedModel) -> Result<Prepared> {
    let norm = m
        .checkpoint
        .normalizer
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no normalizer".into()))?;
    if norm.variables != record.variables {
        return Err(Error::InvalidArgument(format!(
            "model variables {:?} do not match dataset {:?}",
            norm.variables, record.variables
        )));
    }
    dataset::prepare(record, &cfg.data.split, m.shape, Some(norm))
}

pub fn predict(cfg: &RunConfig, data: &Path, model: &Path, split: SplitName, out: &mut Outputs) -> Result<()> {
    let ds = load_record(cfg, data)?;
    let m = load_model(cfg, model)?;
    let prep = prepared_for(cfg, &ds.record, &m)?;
    let windows = prep.windows(split);
    let y_hat = predict_batch(&m.model, windows, &prep.normalizer)?;
    let y = targets(windows, &prep.normalizer);
    let offset = m.shape.history + m.shape.horizon - 1;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["timestamp", "y", "y_hat"])?;
    for ((win, y), p) in windows.iter().zip(&y).zip(&y_hat) {
        let ts = ds.record.timestamps[win.start + offset];
        w.write_record(&[ts.to_string(), y.to_string(), p.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    out.write("predictions.csv", bytes)?;
    println!("wrote {} predictions", windows.len());
    Ok(())
}

fn method_label(model: &GarnnModel) -> String {
    let c = model.config();
    let v = match c.variant {
        Variant::Gat => "GAT",
        Variant::Gatv2 => "GATv2",
    };
    format!("{v}+GRU(L={})", c.layers)
}

pub fn evaluate(cfg: &RunConfig, data: &[PathBuf], models: &[PathBuf], split: SplitName, out: &mut Outputs) -> Result<()> {
    if data.is_empty() || models.is_empty() {
        return Err(Error::InvalidArgument("evaluate needs at least one --data and one --model".into()));
    }
    let penalty = PenaltyConfig::default();
    let mut report = MetricReport::default();
    let mut baseline = MetricReport::default();
    let mut label = String::new();
    for d in data {
        let ds = load_record(cfg, d)?;
        for (i, path) in models.iter().enumerate() {
            let m = load_model(cfg, path)?;
            label = method_label(&m.model);
            let seed = m.checkpoint.seed.unwrap_or(i as u64);
            let prep = prepared_for(cfg, &ds.record, &m)?;
            let windows = nonempty("evaluation windows", prep.windows(split))?;
            let max_shift = cfg.data.max_lag.unwrap_or(m.shape.horizon);
            let dt = ds.record.interval_minutes;
            let y = targets(windows, &prep.normalizer);
            let y_hat = predict_batch(&m.model, windows, &prep.normalizer)?;
            report.add(ds.record.participant.clone(), seed, MetricSet::evaluate(&y, &y_hat, dt, max_shift, &penalty)?);
            let pers = persistence(windows, &prep.normalizer);
            baseline.add(ds.record.participant.clone(), seed, MetricSet::evaluate(&y, &pers, dt, max_shift, &penalty)?);
        }
    }
    out.write("metrics.csv", csv_bytes(|b| report.write_csv(b))?)?;
    out.write("persistence_metrics.csv", csv_bytes(|b| baseline.write_csv(b))?)?;

    let (model_rmse, base_rmse) = (report.pooled(0)?.mean, baseline.pooled(0)?.mean);
    let improvement = 100.0 * (1.0 - model_rmse / base_rmse);
    let mut text = report.table(&label)?;
    text.push_str(baseline.table("persistence")?.lines().nth(1).unwrap_or(""));
    text.push('\n');
    let _ = writeln!(text, "\nRMSE improvement over persistence: {improvement:.2}%");
    out.write("metrics.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn mean_matrix(mats: &[ImportanceMatrix]) -> Result<ImportanceMatrix> {
    let first = mats.first().ok_or(Error::Empty("explain"))?;
    let mut acc = vec![0.0; first.values.len()];
    for m in mats {
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let k = mats.len() as f64;
    ImportanceMatrix::new(first.n_vars, first.timesteps, acc.into_iter().map(|a| a / k).collect())
}

pub fn explain_cmd(
    cfg: &RunConfig,
    data: &Path,
    model: Option<&Path>,
    split: SplitName,
    examples: usize,
    out: &mut Outputs,
) -> Result<()> {
    let ds = load_record(cfg, data)?;
    let (model, prep) = match model {
        Some(p) => {
            let m = load_model(cfg, p)?;
            let prep = prepared_for(cfg, &ds.record, &m)?;
            (m.model, prep)
        }
        None => {
            // Untrained: every parameter zero.
            let prep = dataset::prepare(&ds.record, &cfg.data.split, windowing(cfg), None)?;
            (GarnnModel::zeros(cfg.model.model_config(ds.record.n_vars()))?, prep)
        }
    };
    let windows = nonempty("explanation windows", prep.windows(split))?;
    let names = &ds.record.variables;
    let mats = explain(&model, windows)?;
    let ranking = dataset_importance(&mats)?;
    let label = method_label(&model);

    out.write("ranking.csv", csv_bytes(|b| write_ranking_csv(&ranking, names, b))?)?;
    let table = ranking_table(&ranking, names)?;
    out.write("ranking.txt", format!("{label}\n{table}"))?;

    let mean = mean_matrix(&mats)?;
    out.write("importance_mean.csv", csv_bytes(|b| write_importance_csv(&mean, names, b))?)?;
    let title = format!("{label}: mean importance over {} windows", mats.len());
    out.write("heatmap_mean.svg", render_heatmap_svg(&feature_map(&mean), names, &title)?)?;
    for (i, (m, w)) in mats.iter().zip(windows).take(examples).enumerate() {
        out.write(&format!("importance_window{i}.csv"), csv_bytes(|b| write_importance_csv(m, names, b))?)?;
        let title = format!("{label}: window starting at row {}", w.start);
        out.write(&format!("heatmap_window{i}.svg"), render_heatmap_svg(&feature_map(m), names, &title)?)?;
    }
    print!("{label}\n{table}");
    Ok(())
}

/// Random model with every bias also drawn, so no pre-activation is
/// trivially zero.
fn random_model(cfg: &RunConfig, variant: Variant, alpha: f64, rng: &mut ChaCha8Rng) -> Result<GarnnModel> {
    let mut mc = cfg.model.model_config(cfg.verify.n_vars);
    mc.variant = variant;
    mc.alpha = alpha;
    let mut model = GarnnModel::init(mc, rng.gen())?;
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    Ok(model)
}

pub fn verify_theorems(
    cfg: &RunConfig,
    seed: u64,
    alphas: &[f64],
    variants: &[Variant],
    out: &mut Outputs,
) -> Result<bool> {
    let (n, t_len) = (cfg.verify.n_vars, cfg.verify.timesteps);
    let mut gaps = csv::Writer::from_writer(Vec::new());
    gaps.write_record(["variant", "alpha", "draw", "t", "layer", "var", "raw", "linear", "gap", "bound"])?;
    let mut ranks = csv::Writer::from_writer(Vec::new());
    ranks.write_record(["variant", "alpha", "checks", "failures", "dynamic"])?;
    let mut summary = String::new();
    let mut all_ok = true;

    for &variant in variants {
        for &alpha in alphas {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut max_gap, mut max_excess, mut neg) = (0.0f64, f64::NEG_INFINITY, false);
            let (mut checks, mut failures, mut dynamic) = (0usize, 0usize, 0usize);
            for draw in 0..cfg.verify.draws {
                let model = random_model(cfg, variant, alpha, &mut rng)?;
                let values = (0..n * t_len).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let window = MtsWindow::new(n, t_len, values, 0.0)?;
                let (_, trace) = model.forward(&window)?;
                let layers = layers_of(&model)?;
                let report = theorem3_gap(&trace, &layers, alpha)?;
                max_gap = max_gap.max(report.max_abs_gap());
                max_excess = max_excess.max(report.max_excess());
                neg |= !report.nonnegative();
                for e in &report.entries {
                    gaps.write_record(&[
                        variant.to_string(),
                        alpha.to_string(),
                        draw.to_string(),
                        e.t.to_string(),
                        e.layer.to_string(),
                        e.var.to_string(),
                        e.raw.to_string(),
                        e.linear.to_string(),
                        e.gap.to_string(),
                        e.bound.to_string(),
                    ])?;
                }
                for r in static_ranking_sweep(&trace, &layers)? {
                    checks += 1;
                    failures += usize::from(!r.passed());
                    dynamic += usize::from(!r.raw_receivers_agree);
                }
            }
            ranks.write_record(&[
                variant.to_string(),
                alpha.to_string(),
                checks.to_string(),
                failures.to_string(),
                dynamic.to_string(),
            ])?;
            let bound_ok = max_excess <= GAP_SLACK;
            let sign_ok = variant == Variant::Gatv2 || !neg;
            let identity_ok = alpha != 1.0 || max_gap < IDENTITY_GAP_TOL;
            let static_ok = failures == 0;
            let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
            let _ = writeln!(
                summary,
                "{variant} alpha={alpha}: gap bound {} (max |gap| {max_gap:.3e}, max excess {max_excess:.3e}); \
                 gap sign {}; identity {}; static ranking {} ({checks} checks, {dynamic} with dynamic raw scores)",
                mark(bound_ok),
                if variant == Variant::Gat { mark(sign_ok) } else { "n/a" },
                if alpha == 1.0 { mark(identity_ok) } else { "n/a" },
                mark(static_ok),
            );
            all_ok &= bound_ok && sign_ok && identity_ok && static_ok;
        }
    }
    let _ = writeln!(summary, "overall: {}", if all_ok { "PASS" } else { "FAIL" });
    let inner = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()));
    out.write("gap_report.csv", inner(gaps)?)?;
    out.write("static_ranking.csv", inner(ranks)?)?;
    out.write("summary.txt", &summary)?;
    print!("{summary}");
    Ok(all_ok)
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: e.code().to_string(),
            msg: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Error::from(e).into()
    }
}
