//! Dataset directories (`dataset.csv`, `metadata.json`, `events.csv`) and
//! the split/window preparation shared by the subcommands.

use std::path::{Path, PathBuf};

use garnn::data::{
    encode_timestamp, load_csv, make_windows, read_event_masks, DatasetMetadata, MtsRecord, MtsWindow, Normalizer,
    SplitSpec, Timestamp, TIMESTAMP_CHANNEL,
};
use garnn::model::Windowing;
use garnn::{Error, Result};

pub const DATASET_FILE: &str = "dataset.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const EVENTS_FILE: &str = "events.csv";

pub struct Dataset {
    pub record: MtsRecord,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

/// Reads a dataset directory, or a bare CSV file without sidecars.
pub fn load(path: &Path) -> Result<Dataset> {
    let (csv, dir): (PathBuf, Option<&Path>) = if path.is_dir() {
        (path.join(DATASET_FILE), Some(path))
    } else {
        (path.to_path_buf(), None)
    };
    if !csv.exists() {
        return Err(Error::InvalidArgument(format!("dataset not found: {}", csv.display())));
    }
    let metadata = match dir.map(|d| d.join(METADATA_FILE)) {
        Some(p) if p.exists() => Some(DatasetMetadata::load(&p)?),
        _ => None,
    };
    let mut record = load_csv(&csv, metadata.as_ref().map(|m| m.variables.as_slice()))?;
    if let Some(m) = &metadata {
        record.participant = m.participant.clone();
        record.interval_minutes = m.interval_minutes;
    }
    if let Some(events) = dir.map(|d| d.join(EVENTS_FILE)).filter(|p| p.exists()) {
        let file = std::fs::File::open(&events).map_err(|e| io(&events, e))?;
        record.event_masks = read_event_masks(file, record.len())?;
    }
    Ok(Dataset { record })
}

/// Appends the time-of-day channel to wall-clock records that lack one.
pub fn with_timestamp_channel(record: MtsRecord, enabled: bool) -> Result<MtsRecord> {
    let wall = matches!(record.timestamps.first(), Some(Timestamp::Wall(_)));
    if enabled && wall && record.variable_index(TIMESTAMP_CHANNEL).is_none() {
        encode_timestamp(&record)
    } else {
        Ok(record)
    }
}

/// Train, validation and test windows under a normaliser fitted on the
/// training rows.
pub struct Prepared {
    pub normalizer: Normalizer,
    pub train: Vec<MtsWindow>,
    pub validation: Vec<MtsWindow>,
    pub test: Vec<MtsWindow>,
}

pub fn prepare(record: &MtsRecord, split: &SplitSpec, shape: Windowing, normalizer: Option<&Normalizer>) -> Result<Prepared> {
    split.validate()?;
    let (tr, va, te) = split.split(record);
    let normalizer = match normalizer {
        Some(n) => n.clone(),
        None => Normalizer::fit(&tr),
    };
    let win = |r: &MtsRecord| make_windows(r, &normalizer, shape.history, shape.horizon);
    let train = win(&tr)?;
    let validation = win(&va)?;
    let test = win(&te)?;
    Ok(Prepared {
        normalizer,
        train,
        validation,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl Prepared {
    pub fn windows(&self, split: SplitName) -> &[MtsWindow] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}
