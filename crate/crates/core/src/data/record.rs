use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the derived time-of-day channel.
pub const TIMESTAMP_CHANNEL: &str = "timestamp";

const WALL_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Timestamp {
    Index(i64),
    Wall(NaiveDateTime),
}

impl Timestamp {
    pub fn parse(s: &str) -> Option<Timestamp> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Some(Timestamp::Index(i));
        }
        for fmt in [WALL_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S%.f"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(Timestamp::Wall(dt));
            }
        }
        chrono::DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|dt| Timestamp::Wall(dt.naive_local()))
    }

    fn same_kind(&self, other: &Timestamp) -> bool {
        matches!(
            (self, other),
            (Timestamp::Index(_), Timestamp::Index(_)) | (Timestamp::Wall(_), Timestamp::Wall(_))
        )
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Timestamp::Index(i) => write!(f, "{i}"),
            Timestamp::Wall(dt) => write!(f, "{}", dt.format(WALL_FORMAT)),
        }
    }
}

/// A participant's multivariate series. Variable 0 is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct MtsRecord {
    pub participant: String,
    /// Sampling interval δt in minutes.
    pub interval_minutes: f64,
    pub variables: Vec<String>,
    pub timestamps: Vec<Timestamp>,
    /// `values[t][var]`, `None` where missing.
    pub values: Vec<Vec<Option<f64>>>,
    /// Ground-truth event rows per sparse variable.
    pub event_masks: BTreeMap<String, Vec<bool>>,
    /// Row of the source record this record starts at.
    pub origin: usize,
}

impl MtsRecord {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    pub fn column(&self, var: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.values.iter().map(move |row| row[var])
    }

    /// Rows `range`, with masks sliced alongside.
    pub fn slice(&self, range: Range<usize>) -> MtsRecord {
        MtsRecord {
            participant: self.participant.clone(),
            interval_minutes: self.interval_minutes,
            variables: self.variables.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values[range.clone()].to_vec(),
            event_masks: self
                .event_masks
                .iter()
                .map(|(k, m)| (k.clone(), m[range.clone()].to_vec()))
                .collect(),
            origin: self.origin + range.start,
        }
    }

    /// Copy with every missing entry of `vars` set to `value`.
    pub fn fill_missing(&self, vars: &[String], value: f64) -> Result<MtsRecord> {
        let idx: Vec<usize> = vars
            .iter()
            .map(|name| {
                self.variable_index(name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown variable `{name}`")))
            })
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        for row in &mut out.values {
            for &v in &idx {
                row[v].get_or_insert(value);
            }
        }
        Ok(out)
    }

    /// Variables that carry an event mask, in column order.
    pub fn event_variables(&self) -> Vec<String> {
        self.variables
            .iter()
            .filter(|v| self.event_masks.contains_key(*v))
            .cloned()
            .collect()
    }

    fn check_invariants(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::Parse {
                row: 0,
                msg: "no target variable column".into(),
            });
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != self.variables.len() {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: format!("expected {} values, found {}", self.variables.len(), row.len()),
                });
            }
        }
        check_timestamps(&self.timestamps)
    }
}

fn check_timestamps(ts: &[Timestamp]) -> Result<()> {
    for i in 1..ts.len() {
        if !ts[i].same_kind(&ts[0]) {
            return Err(Error::Parse {
                row: i + 1,
                msg: "timestamp kind differs from the first row".into(),
            });
        }
        if ts[i] <= ts[i - 1] {
            return Err(Error::Parse {
                row: i + 1,
                msg: format!("duplicate or decreasing timestamp `{}`", ts[i]),
            });
        }
    }
    Ok(())
}

fn infer_interval(ts: &[Timestamp]) -> f64 {
    match (ts.first(), ts.get(1)) {
        (Some(Timestamp::Wall(a)), Some(Timestamp::Wall(b))) => (*b - *a).num_seconds() as f64 / 60.0,
        (Some(Timestamp::Index(a)), Some(Timestamp::Index(b))) => (b - a) as f64,
        _ => 1.0,
    }
}

/// Parses `timestamp,<target>,<var…>`. Data rows are numbered from 1
/// (the header is row 0). Empty cells are missing values.
///
/// With `schema`, the header's variable columns must match it exactly.
pub fn read_csv<R: Read>(reader: R, participant: &str, schema: Option<&[String]>) -> Result<MtsRecord> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = headers.iter();
    match cols.next() {
        Some(h) if h.eq_ignore_ascii_case(TIMESTAMP_CHANNEL) => {}
        other => {
            return Err(Error::Parse {
                row: 0,
                msg: format!("first column must be `timestamp`, found {:?}", other.unwrap_or("")),
            })
        }
    }
    let variables: Vec<String> = cols.map(str::to_string).collect();
    if variables.is_empty() {
        return Err(Error::Parse {
            row: 0,
            msg: "missing target column".into(),
        });
    }
    if let Some(expected) = schema {
        if let Some(unknown) = variables.iter().find(|v| !expected.contains(v)) {
            return Err(Error::Parse {
                row: 0,
                msg: format!("unknown column `{unknown}`"),
            });
        }
        if let Some(absent) = expected.iter().find(|v| !variables.contains(v)) {
            return Err(Error::Parse {
                row: 0,
                msg: format!("missing column `{absent}`"),
            });
        }
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if rec.len() != variables.len() + 1 {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, found {}", variables.len() + 1, rec.len()),
            });
        }
        let ts = Timestamp::parse(&rec[0]).ok_or_else(|| Error::Parse {
            row,
            msg: format!("unparseable timestamp `{}`", &rec[0]),
        })?;
        if let Some(prev) = timestamps.last() {
            if !ts.same_kind(prev) {
                return Err(Error::Parse {
                    row,
                    msg: "timestamp kind differs from the first row".into(),
                });
            }
            if ts <= *prev {
                return Err(Error::Parse {
                    row,
                    msg: format!("duplicate or decreasing timestamp `{ts}`"),
                });
            }
        }
        timestamps.push(ts);
        let mut vals = Vec::with_capacity(variables.len());
        for (c, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                vals.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(Some(v)),
                _ => {
                    return Err(Error::Parse {
                        row,
                        msg: format!("non-numeric value `{cell}` in column `{}`", variables[c]),
                    })
                }
            }
        }
        values.push(vals);
    }
    let interval_minutes = infer_interval(&timestamps);
    Ok(MtsRecord {
        participant: participant.to_string(),
        interval_minutes,
        variables,
        timestamps,
        values,
        event_masks: BTreeMap::new(),
        origin: 0,
    })
}

/// Reads a record from `path`; the participant id is the file stem.
pub fn load_csv(path: &Path, schema: Option<&[String]>) -> Result<MtsRecord> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let participant = path.file_stem().and_then(|s| s.to_str()).unwrap_or("participant");
    read_csv(file, participant, schema)
}

/// Writes the CSV form read by [`read_csv`]. Values use shortest
/// round-trip formatting.
pub fn write_csv<W: Write>(record: &MtsRecord, writer: W) -> Result<()> {
    record.check_invariants()?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![TIMESTAMP_CHANNEL.to_string()];
    header.extend(record.variables.iter().cloned());
    w.write_record(&header)?;
    for (ts, row) in record.timestamps.iter().zip(&record.values) {
        let mut fields = vec![ts.to_string()];
        fields.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_csv(record: &MtsRecord, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(record, file)
}

/// Appends a `timestamp` channel: minutes since midnight / 1440 for
/// wall-clock records, row position scaled to `[0, 1]` for index records.
pub fn encode_timestamp(record: &MtsRecord) -> Result<MtsRecord> {
    if record.variable_index(TIMESTAMP_CHANNEL).is_some() {
        return Err(Error::InvalidArgument("record already has a timestamp channel".into()));
    }
    let m = record.len();
    let mut out = record.clone();
    out.variables.push(TIMESTAMP_CHANNEL.to_string());
    for (i, (ts, row)) in record.timestamps.iter().zip(out.values.iter_mut()).enumerate() {
        let v = match ts {
            Timestamp::Wall(dt) => (dt.hour() * 60 + dt.minute()) as f64 / 1440.0,
            Timestamp::Index(_) if m > 1 => i as f64 / (m - 1) as f64,
            Timestamp::Index(_) => 0.0,
        };
        row.push(Some(v));
    }
    Ok(out)
}

/// Event masks as `timestep,variable` rows (timestep = row index).
pub fn write_event_masks<W: Write>(record: &MtsRecord, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestep", "variable"])?;
    let mut pairs: Vec<(usize, &str)> = record
        .event_masks
        .iter()
        .flat_map(|(name, mask)| {
            mask.iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(move |(t, _)| (t, name.as_str()))
        })
        .collect();
    pairs.sort();
    for (t, name) in pairs {
        w.write_record([t.to_string().as_str(), name])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads masks written by [`write_event_masks`] for a record of `len` rows.
pub fn read_event_masks<R: Read>(reader: R, len: usize) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let t: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse { row, msg: "bad timestep".into() })?;
        let name = rec.get(1).ok_or_else(|| Error::Parse { row, msg: "missing variable".into() })?;
        if t >= len {
            return Err(Error::Parse {
                row,
                msg: format!("timestep {t} beyond record length {len}"),
            });
        }
        masks.entry(name.trim().to_string()).or_insert_with(|| vec![false; len])[t] = true;
    }
    Ok(masks)
}
