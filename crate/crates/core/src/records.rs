//! Result rows, their CSV file and the per-cell summary over seeds.
//!
//! `records.csv` has the fixed header
//!
//! ```text
//! experiment_id,seed,task,prune_iteration,remaining_fraction,init_scheme,phase,split,metric,value
//! ```
//!
//! `prune_iteration` counts the pruning steps applied to the mask of the
//! measured network (0 = dense).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 10] = [
    "experiment_id",
    "seed",
    "task",
    "prune_iteration",
    "remaining_fraction",
    "init_scheme",
    "phase",
    "split",
    "metric",
    "value",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretext,
    Retrain,
    Probe,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_id: String,
    pub seed: u64,
    pub task: String,
    pub prune_iteration: usize,
    pub remaining_fraction: f64,
    pub init_scheme: String,
    pub phase: Phase,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.remaining_fraction > 0.0 && self.remaining_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "remaining_fraction {} outside (0,1] in metric `{}`",
                self.remaining_fraction, self.metric
            )));
        }
        if !self.value.is_finite() {
            return Err(Error::NonFinite(format!("record value for `{}`", self.metric)));
        }
        Ok(())
    }
}

pub(crate) fn to_csv(records: &[ExperimentRecord], header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if header {
        w.write_record(HEADER)?;
    }
    for r in records {
        r.validate()?;
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Parses CSV text, requiring the exact header.
pub fn parse_records(text: &[u8]) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::InvalidArgument(format!("unexpected records header {:?}", header)));
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        let rec: ExperimentRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes)
}

/// Writes a complete file via a temporary sibling and a rename, so readers
/// never see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    write_atomic(path, &to_csv(records, true)?)
}

/// Append-only record file. Each batch of rows is flushed and synced before
/// `append` returns; a torn final line left by a crash is cut off when the
/// file is reopened.
pub struct RecordLog {
    path: PathBuf,
    file: File,
}

impl RecordLog {
    pub fn open(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path).map_err(io)?;
        let mut text = Vec::new();
        file.read_to_end(&mut text).map_err(io)?;
        let keep = match text.iter().rposition(|&b| b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        if keep != text.len() {
            file.set_len(keep as u64).map_err(io)?;
        }
        file.seek(SeekFrom::Start(keep as u64)).map_err(io)?;
        if keep == 0 {
            file.write_all(&to_csv(&[], true)?).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok(RecordLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, records: &[ExperimentRecord]) -> Result<()> {
        let bytes = to_csv(records, false)?;
        let io = |e| Error::io(&self.path, e);
        self.file.write_all(&bytes).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Mean and standard error over seeds of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub experiment_id: String,
    pub task: String,
    pub prune_iteration: usize,
    pub remaining_fraction: f64,
    pub init_scheme: String,
    pub phase: Phase,
    pub split: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 for a single seed.
    pub stderr: f64,
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

type CellKey = (String, String, usize, String, Phase, String, String);

/// Groups rows that differ only in seed. Output is sorted by cell key.
pub fn summarize(records: &[ExperimentRecord]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<CellKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let key = (
            r.experiment_id.clone(),
            r.task.clone(),
            r.prune_iteration,
            r.init_scheme.clone(),
            r.phase,
            r.split.clone(),
            r.metric.clone(),
        );
        let g = groups.entry(key).or_default();
        g.0.push(r.value);
        g.1.push(r.remaining_fraction);
    }
    groups
        .into_iter()
        .map(|((experiment_id, task, prune_iteration, init_scheme, phase, split, metric), (vals, fracs))| {
            let (mean, stderr) = mean_stderr(&vals);
            SummaryCell {
                experiment_id,
                task,
                prune_iteration,
                remaining_fraction: fracs.iter().sum::<f64>() / fracs.len() as f64,
                init_scheme,
                phase,
                split,
                metric,
                n: vals.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, cells: &[SummaryCell]) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(cells)?;
    text.push(b'\n');
    write_atomic(path, &text)
}
