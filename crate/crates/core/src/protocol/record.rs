//! Session log records and their line-delimited storage.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One participant round. Routes and states are 0-based; `s` and `k` count from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub s: usize,
    pub k: usize,
    pub state: usize,
    pub rating_displayed: f64,
    pub recommended: usize,
    pub chosen: usize,
    pub flows: Vec<f64>,
    pub travel_times: Vec<f64>,
    pub review: f64,
    pub regret: f64,
    pub t_start: u64,
    pub t_end: u64,
}

impl RoundRecord {
    pub fn followed(&self) -> bool {
        self.chosen == self.recommended
    }
}

/// All rounds of one participant, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub s: usize,
    pub records: Vec<RoundRecord>,
    /// Rating after the last review.
    pub final_rating: f64,
}

impl SessionLog {
    pub fn follow_count(&self) -> usize {
        self.records.iter().filter(|r| r.followed()).count()
    }

    /// Writes the log as one JSON document, via a temp file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(self)?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn mean_review(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.review).sum::<f64>() / self.records.len() as f64)
    }
}

/// Durable destination for round records.
pub trait RoundSink {
    fn append(&mut self, rec: &RoundRecord) -> std::io::Result<()>;
}

impl RoundSink for Vec<RoundRecord> {
    fn append(&mut self, rec: &RoundRecord) -> std::io::Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl RoundSink for NullSink {
    fn append(&mut self, _rec: &RoundRecord) -> std::io::Result<()> {
        Ok(())
    }
}

/// Append-only JSON-lines file, flushed and synced after every record.
pub struct JsonlSink {
    file: File,
    path: PathBuf,
}

impl JsonlSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RoundSink for JsonlSink {
    fn append(&mut self, rec: &RoundRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.file.sync_data()
    }
}

/// Reads records from a JSON-lines file. Blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RoundRecord>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.as_ref().display(), no + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Groups records into per-participant logs ordered by `s` then `k`.
///
/// `final_rating` is unknown from records alone, so it is set to the last
/// displayed rating.
pub fn group_sessions(records: Vec<RoundRecord>) -> Vec<SessionLog> {
    let mut by_s: BTreeMap<usize, Vec<RoundRecord>> = BTreeMap::new();
    for r in records {
        by_s.entry(r.s).or_default().push(r);
    }
    by_s.into_iter()
        .map(|(s, mut records)| {
            records.sort_by_key(|r| r.k);
            let final_rating = records.last().map_or(0.0, |r| r.rating_displayed);
            SessionLog {
                s,
                records,
                final_rating,
            }
        })
        .collect()
}

/// Loads every `*.jsonl` file under `path` (or `path` itself if it is a file).
pub fn read_session_logs(path: impl AsRef<Path>) -> Result<Vec<SessionLog>> {
    let path = path.as_ref();
    let mut records = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for f in files {
            records.extend(read_records(&f)?);
        }
    } else {
        records = read_records(path)?;
    }
    if records.is_empty() {
        return Err(Error::Empty("session logs"));
    }
    Ok(group_sessions(records))
}
