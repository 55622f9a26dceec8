use garnn::data::{generate_synthetic, make_windows, read_csv, write_csv, Normalizer, SplitSpec, SyntheticConfig};
use garnn::interpret::{dataset_importance, explain, feature_map};
use garnn::model::{Checkpoint, ModelConfig, Variant};
use garnn::training::{fit, predict_batch, TrainConfig};

fn small_run(seed: u64) -> (garnn::training::FitResult, Vec<garnn::data::MtsWindow>, Normalizer) {
    let rec = generate_synthetic(3, 2, 5.0, &SyntheticConfig::default()).unwrap();
    let (tr, va, te) = SplitSpec::default().split(&rec);
    let norm = Normalizer::fit(&tr);
    let w = |r| make_windows(r, &norm, 12, 3).unwrap();
    let (train, val, test) = (w(&tr), w(&va), w(&te));
    let config = ModelConfig {
        hidden_dim: 8,
        head_hidden: 4,
        ..ModelConfig::new(rec.n_vars(), Variant::Gatv2)
    };
    let tc = TrainConfig {
        max_epochs: 3,
        seed,
        ..TrainConfig::default()
    };
    (fit(&train, &val, config, &tc).unwrap(), test, norm)
}

#[test]
fn training_is_bit_reproducible() {
    let (a, _, _) = small_run(7);
    let (b, _, _) = small_run(7);
    assert_eq!(a.curve, b.curve);
    for (name, t) in a.model.params().iter() {
        let u = b.model.params().get(name).unwrap();
        assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
    let (c, _, _) = small_run(8);
    assert_ne!(a.curve, c.curve);
}

#[test]
fn checkpoint_restores_predictions_and_explanations() {
    let (run, test, norm) = small_run(1);
    let json = Checkpoint::from_model(&run.model, Some(norm.clone())).to_json().unwrap();
    let back = Checkpoint::from_json(&json).unwrap();
    let model = back.to_model().unwrap();
    let restored_norm = back.normalizer.unwrap();
    assert_eq!(
        predict_batch(&run.model, &test, &norm).unwrap(),
        predict_batch(&model, &test, &restored_norm).unwrap()
    );
    let mats = explain(&model, &test).unwrap();
    assert_eq!(mats.len(), test.len());
    let ranking = dataset_importance(&mats).unwrap();
    assert_eq!(ranking.order.len(), model.config().n_vars);
    let map = feature_map(&mats[0]);
    assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn csv_round_trip_preserves_the_record() {
    let rec = generate_synthetic(5, 1, 5.0, &SyntheticConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_csv(&rec, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), &rec.participant, Some(&rec.variables)).unwrap();
    assert_eq!(back.variables, rec.variables);
    assert_eq!(back.timestamps, rec.timestamps);
    assert_eq!(back.values, rec.values);
}
