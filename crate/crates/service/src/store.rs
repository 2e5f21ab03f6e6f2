//! Durable storage under one data directory.
//!
//! ```text
//! <data_dir>/datasets/<id>.json   dataset record
//! <data_dir>/datasets/<id>.csv    canonical interaction CSV
//! <data_dir>/configs/<id>.json    split configuration
//! <data_dir>/runs/<run_id>.jsonl  append-only run event log, one JSON event per line
//! <data_dir>/jobs/<id>.json       latest job record
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use nbeval_core::interactions::{self, DatasetDescriptor, InteractionLog};
use nbeval_core::protocol::{EventSink, RunEvent};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use uuid::Uuid;

use crate::model::{ConfigRecord, DatasetRecord, JobRecord};

/// Result of reading one run's event log.
pub type RunLog = Result<Vec<RunEvent>, String>;

/// Persistence used by the service. Run events go through [`EventSink`].
pub trait Store: EventSink {
    fn put_dataset(&self, record: &DatasetRecord, log: &InteractionLog) -> io::Result<()>;
    fn dataset_records(&self) -> io::Result<Vec<DatasetRecord>>;
    fn load_dataset(&self, id: &str) -> io::Result<InteractionLog>;
    fn delete_dataset(&self, id: &str) -> io::Result<()>;

    fn put_config(&self, record: &ConfigRecord) -> io::Result<()>;
    fn config_records(&self) -> io::Result<Vec<ConfigRecord>>;
    fn delete_config(&self, id: &str) -> io::Result<()>;

    fn put_job(&self, record: &JobRecord) -> io::Result<()>;
    fn job_records(&self) -> io::Result<Vec<JobRecord>>;

    fn run_logs(&self) -> io::Result<Vec<(Uuid, RunLog)>>;
}

#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    // serializes appends from concurrent runs on one directory handle
    append_lock: Mutex<()>,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["datasets", "configs", "runs", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(FileStore {
            root,
            append_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_log_path(&self, run_id: Uuid) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.jsonl"))
    }

    fn write_json<T: Serialize>(&self, path: PathBuf, value: &T) -> io::Result<()> {
        let tmp = path.with_extension("json.tmp");
        let mut f = File::create(&tmp)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.sync_all()?;
        fs::rename(tmp, path)
    }

    fn read_dir_json<T: DeserializeOwned>(&self, sub: &str) -> io::Result<Vec<T>> {
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(self.root.join(sub))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let f = File::open(&path)?;
            match serde_json::from_reader(BufReader::new(f)) {
                Ok(v) => out.push(v),
                Err(e) => tracing::warn!("skipping unreadable record {}: {e}", path.display()),
            }
        }
        Ok(out)
    }

    fn remove(path: PathBuf) -> io::Result<()> {
        match fs::remove_file(path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}

/// Parses one run log. Any unreadable line, including a truncated last line, makes the log corrupt.
pub fn parse_run_log(text: &str) -> RunLog {
    if !text.is_empty() && !text.ends_with('\n') {
        return Err("final event is truncated".into());
    }
    text.lines()
        .enumerate()
        .map(|(n, line)| serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1)))
        .collect()
}

impl EventSink for FileStore {
    fn append(&self, run_id: Uuid, event: &RunEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let _guard = self.append_lock.lock();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.run_log_path(run_id))?;
        f.write_all(&line)?;
        f.sync_data()
    }
}

impl Store for FileStore {
    fn put_dataset(&self, record: &DatasetRecord, log: &InteractionLog) -> io::Result<()> {
        let csv_path = self.root.join("datasets").join(format!("{}.csv", record.id));
        let f = File::create(&csv_path)?;
        log.write_csv(io::BufWriter::new(f))
            .map_err(|e| io::Error::other(e.to_string()))?;
        self.write_json(self.root.join("datasets").join(format!("{}.json", record.id)), record)
    }

    fn dataset_records(&self) -> io::Result<Vec<DatasetRecord>> {
        self.read_dir_json("datasets")
    }

    fn load_dataset(&self, id: &str) -> io::Result<InteractionLog> {
        let f = File::open(self.root.join("datasets").join(format!("{id}.csv")))?;
        let ingested = interactions::ingest(&DatasetDescriptor::canonical(id), BufReader::new(f))
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        Ok(ingested.log)
    }

    fn delete_dataset(&self, id: &str) -> io::Result<()> {
        Self::remove(self.root.join("datasets").join(format!("{id}.json")))?;
        Self::remove(self.root.join("datasets").join(format!("{id}.csv")))
    }

    fn put_config(&self, record: &ConfigRecord) -> io::Result<()> {
        self.write_json(self.root.join("configs").join(format!("{}.json", record.id)), record)
    }

    fn config_records(&self) -> io::Result<Vec<ConfigRecord>> {
        self.read_dir_json("configs")
    }

    fn delete_config(&self, id: &str) -> io::Result<()> {
        Self::remove(self.root.join("configs").join(format!("{id}.json")))
    }

    fn put_job(&self, record: &JobRecord) -> io::Result<()> {
        self.write_json(self.root.join("jobs").join(format!("{}.json", record.job_id)), record)
    }

    fn job_records(&self) -> io::Result<Vec<JobRecord>> {
        self.read_dir_json("jobs")
    }

    fn run_logs(&self) -> io::Result<Vec<(Uuid, RunLog)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("runs"))? {
            let path = entry?.path();
            let Some(id) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".jsonl"))
                .and_then(|n| Uuid::parse_str(n).ok())
            else {
                continue;
            };
            let log = match fs::read_to_string(&path) {
                Ok(text) => parse_run_log(&text),
                Err(e) => Err(e.to_string()),
            };
            out.push((id, log));
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nbeval_core::SplitConfig;

    #[test]
    fn run_log_parsing() {
        let reg = RunEvent::Registered {
            run_id: Uuid::nil(),
            metadata: Default::default(),
            config: SplitConfig::new(1, 1),
            dataset_ref: None,
            config_ref: None,
        };
        let mut text = serde_json::to_string(&reg).unwrap();
        text.push('\n');
        text.push_str("{\"event\":\"training_released\"}\n");
        assert_eq!(parse_run_log(&text).unwrap().len(), 2);
        assert!(parse_run_log(&text[..text.len() - 5]).is_err());
        assert!(parse_run_log("").unwrap().is_empty());
    }

    #[test]
    fn empty_directory_has_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        assert!(store.run_logs().unwrap().is_empty());
        assert!(store.job_records().unwrap().is_empty());
    }
}
