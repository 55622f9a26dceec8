//! Ingest, normalisation, windowing and synthetic data.

mod prep;
mod record;
mod synthetic;
mod window;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use prep::{make_windows, Normalizer, SplitSpec, STD_FLOOR};
pub use record::{
    encode_timestamp, load_csv, read_csv, read_event_masks, save_csv, write_csv, write_event_masks, MtsRecord,
    Timestamp, TIMESTAMP_CHANNEL,
};
pub use synthetic::{gamma_kernel, generate_synthetic, SyntheticConfig, BOLUS, GLUCOSE, HEART_RATE, MEAL, NOISE};
pub use window::MtsWindow;

use crate::error::{Error, Result};

/// JSON sidecar describing a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub participant: String,
    pub interval_minutes: f64,
    pub variables: Vec<String>,
    /// Variables whose ground-truth event rows are listed in the mask file.
    #[serde(default)]
    pub event_variables: Vec<String>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub days: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
}

impl DatasetMetadata {
    pub fn for_record(record: &MtsRecord, split: SplitSpec) -> Self {
        DatasetMetadata {
            participant: record.participant.clone(),
            interval_minutes: record.interval_minutes,
            variables: record.variables.clone(),
            event_variables: record.event_masks.keys().cloned().collect(),
            split,
            seed: None,
            days: None,
            generator: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SMALL: &str = "timestamp,glucose,meal\n0,100,\n1,110,30\n2,120,\n";

    #[test]
    fn reads_well_formed_file() {
        let r = read_csv(SMALL.as_bytes(), "p1", None).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.variables, vec!["glucose", "meal"]);
        assert_eq!(r.values[1], vec![Some(110.0), Some(30.0)]);
        assert_eq!(r.values[0][1], None);
    }

    #[test]
    fn decreasing_timestamp_cites_row() {
        let text = "timestamp,glucose\n5,100\n4,110\n6,120\n";
        match read_csv(text.as_bytes(), "p", None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let dup = "timestamp,glucose\n5,100\n6,110\n6,120\n";
        assert!(matches!(read_csv(dup.as_bytes(), "p", None), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn rejects_bad_cells_and_columns() {
        let text = "timestamp,glucose\n0,100\n1,abc\n";
        assert!(matches!(read_csv(text.as_bytes(), "p", None), Err(Error::Parse { row: 2, .. })));
        let schema = vec!["glucose".to_string()];
        let extra = "timestamp,glucose,mystery\n0,100,1\n";
        assert!(matches!(read_csv(extra.as_bytes(), "p", Some(&schema)), Err(Error::Parse { row: 0, .. })));
        assert!(read_csv("time,glucose\n0,1\n".as_bytes(), "p", None).is_err());
    }

    #[test]
    fn wall_clock_timestamps_parse() {
        let text = "timestamp,glucose\n2024-01-01T00:00:00,100\n2024-01-01 00:05:00,101\n";
        let r = read_csv(text.as_bytes(), "p", None).unwrap();
        assert_eq!(r.interval_minutes, 5.0);
    }

    #[test]
    fn encodes_time_of_day() {
        let text = "timestamp,glucose\n2024-01-01T00:00:00,1\n2024-01-01T12:00:00,2\n2024-01-01T23:55:00,3\n";
        let r = encode_timestamp(&read_csv(text.as_bytes(), "p", None).unwrap()).unwrap();
        let col: Vec<f64> = r.column(1).flatten().collect();
        assert_eq!(col, vec![0.0, 0.5, 1435.0 / 1440.0]);
        assert!(encode_timestamp(&r).is_err());

        let idx = encode_timestamp(&read_csv(SMALL.as_bytes(), "p", None).unwrap()).unwrap();
        let col: Vec<f64> = idx.column(2).flatten().collect();
        assert_eq!(col, vec![0.0, 0.5, 1.0]);
    }

    fn ramp(m: usize, n_exo: usize) -> MtsRecord {
        let mut text = String::from("timestamp,glucose");
        for i in 0..n_exo {
            text.push_str(&format!(",x{i}"));
        }
        text.push('\n');
        for t in 0..m {
            text.push_str(&format!("{t},{}", 100 + t));
            for i in 0..n_exo {
                text.push_str(&format!(",{}", (t * (i + 2)) % 7));
            }
            text.push('\n');
        }
        read_csv(text.as_bytes(), "p", None).unwrap()
    }

    #[test]
    fn window_counts() {
        for (m, expect) in [(60, 7), (54, 1), (53, 0)] {
            let r = ramp(m, 1);
            let w = make_windows(&r, &Normalizer::fit(&r), 48, 6).unwrap();
            assert_eq!(w.len(), expect, "M={m}");
        }
    }

    #[test]
    fn window_target_offset_and_provenance() {
        let r = ramp(20, 0);
        let norm = Normalizer::identity(r.variables.clone());
        let w = make_windows(&r, &norm, 4, 2).unwrap();
        assert_eq!(w.len(), 20 - 4 - 2 + 1);
        assert_eq!(w[0].row(0), &[100.0, 101.0, 102.0, 103.0]);
        assert_eq!(w[0].target, 105.0);
        assert_eq!(w[3].start, 3);
    }

    #[test]
    fn missing_exogenous_channel_is_zero() {
        let text: String = std::iter::once("timestamp,glucose,empty\n".to_string())
            .chain((0..10).map(|t| format!("{t},{},\n", 90 + t)))
            .collect();
        let r = read_csv(text.as_bytes(), "p", None).unwrap();
        let w = make_windows(&r, &Normalizer::fit(&r), 4, 1).unwrap();
        assert!(w.iter().all(|w| w.row(1).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn missing_targets_drop_windows() {
        let text = "timestamp,glucose\n0,1\n1,2\n2,\n3,4\n4,5\n";
        let r = read_csv(text.as_bytes(), "p", None).unwrap();
        let w = make_windows(&r, &Normalizer::fit(&r), 1, 1).unwrap();
        // Targets at rows 1..=4; row 2 is missing.
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let rec = generate_synthetic(3, 1, 5.0, &SyntheticConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&rec, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &rec.participant, None).unwrap();
        assert_eq!(back.values, rec.values);
        assert_eq!(back.timestamps, rec.timestamps);
        assert_eq!(back.variables, rec.variables);

        let mut masks = Vec::new();
        write_event_masks(&rec, &mut masks).unwrap();
        assert_eq!(read_event_masks(masks.as_slice(), rec.len()).unwrap(), rec.event_masks);
    }

    #[test]
    fn synthetic_is_deterministic_and_clamped() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(42, 3, 5.0, &cfg).unwrap();
        let b = generate_synthetic(42, 3, 5.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 288);
        assert_eq!(a.variables, vec![GLUCOSE, MEAL, BOLUS, HEART_RATE, NOISE, TIMESTAMP_CHANNEL]);
        assert!(a.column(0).flatten().all(|g| (40.0..=400.0).contains(&g)));
        let meals = a.event_masks[MEAL].iter().filter(|&&m| m).count();
        assert!(meals > 0);
        for (t, row) in a.values.iter().enumerate() {
            assert_eq!(row[1].is_some(), a.event_masks[MEAL][t]);
            assert_eq!(row[2].is_some(), a.event_masks[BOLUS][t]);
        }

        let mut extreme = cfg.clone();
        extreme.meal_gain = 20.0;
        let c = generate_synthetic(1, 2, 5.0, &extreme).unwrap();
        assert!(c.column(0).flatten().all(|g| (40.0..=400.0).contains(&g)));
        assert!(c.column(0).flatten().any(|g| g == 400.0));
    }

    #[test]
    fn without_events_glucose_is_sinusoid_plus_noise() {
        let mut cfg = SyntheticConfig::default();
        cfg.meals_per_day = 0.0;
        let quiet = generate_synthetic(5, 2, 5.0, &cfg).unwrap();
        assert!(quiet.event_masks[MEAL].iter().all(|&m| !m));
        assert!(quiet.event_masks[BOLUS].iter().all(|&m| !m));

        cfg.ar_sigma = 1e-300;
        let clean = generate_synthetic(5, 2, 5.0, &cfg).unwrap();
        for (i, g) in clean.column(0).enumerate() {
            let t = i as f64 * 5.0;
            let expect = 140.0 + 30.0 * (2.0 * std::f64::consts::PI * t / 1440.0).sin();
            assert!((g.unwrap() - expect).abs() < 1e-9);
        }
        // The glucose noise stream does not depend on the meal stream.
        let with_meals = generate_synthetic(5, 2, 5.0, &SyntheticConfig::default()).unwrap();
        assert_eq!(with_meals.column(3).collect::<Vec<_>>(), quiet.column(3).collect::<Vec<_>>());
    }

    #[test]
    fn normalizer_standardises_training_rows() {
        let rec = generate_synthetic(8, 4, 5.0, &SyntheticConfig::default()).unwrap();
        let (train, _, _) = SplitSpec::default().split(&rec);
        let norm = Normalizer::fit(&train);
        for v in 0..train.n_vars() {
            let z: Vec<f64> = train.column(v).flatten().map(|x| norm.transform(v, x)).collect();
            if z.len() < 2 {
                continue;
            }
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            assert!(mean.abs() < 1e-10, "{}: mean {mean}", train.variables[v]);
            assert!((std - 1.0).abs() < 1e-10, "{}: std {std}", train.variables[v]);
        }
    }

    #[test]
    fn windows_never_straddle_splits() {
        let rec = generate_synthetic(2, 3, 5.0, &SyntheticConfig::default()).unwrap();
        let (tr, va, te) = SplitSpec::default().ranges(rec.len());
        let (a, b, c) = SplitSpec::default().split(&rec);
        let norm = Normalizer::fit(&a);
        for (piece, range) in [(a, tr), (b, va), (c, te)] {
            for w in make_windows(&piece, &norm, 48, 6).unwrap() {
                assert!(w.start >= range.start && w.start + 48 + 6 <= range.end);
            }
        }
    }

    #[test]
    fn split_spec_validation() {
        assert!(SplitSpec::new(0.6, 0.2, 0.2).is_ok());
        assert!(SplitSpec::new(0.6, 0.3, 0.2).is_err());
        assert!(SplitSpec::new(0.8, 0.2, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn window_count_formula(m in 1usize..120, t in 1usize..30, h in 1usize..10) {
            let r = ramp(m, 1);
            let w = make_windows(&r, &Normalizer::fit(&r), t, h).unwrap();
            let expect = if m >= t + h { m - t - h + 1 } else { 0 };
            prop_assert_eq!(w.len(), expect);
        }

        #[test]
        fn normalizer_inverts(x in -1e4f64..1e4, mean in -500.0f64..500.0, std in 1e-3f64..100.0) {
            let n = Normalizer { variables: vec!["g".into()], mean: vec![mean], std: vec![std] };
            prop_assert!((n.inverse(0, n.transform(0, x)) - x).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }
}
