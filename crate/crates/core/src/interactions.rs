//! Timestamped user-item interaction logs and their ingestion from delimited text.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer seconds since the Unix epoch.
pub type Timestamp = i64;

/// Maximum number of individual rejections kept in an ingest summary.
pub const MAX_REPORTED_REJECTIONS: usize = 1_000;

/// A single user-item event on the global timeline.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: Timestamp,
    /// Ordinal of the source row, used to break timestamp ties.
    pub seq: u64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: Timestamp, seq: u64) -> Self {
        Interaction {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
            seq,
        }
    }

    fn order_key(&self) -> (Timestamp, u64) {
        (self.timestamp, self.seq)
    }
}

/// Interactions sorted ascending by `(timestamp, seq)`. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn empty() -> Self {
        InteractionLog::default()
    }

    /// Builds a log from records in any order. The sort is stable on `(timestamp, seq)`.
    pub fn from_records(mut records: Vec<Interaction>) -> Self {
        records.sort_by_key(Interaction::order_key);
        InteractionLog { records }
    }

    /// Builds a log from `(user, item, timestamp)` triples, numbering rows in input order.
    pub fn from_triples<U, I>(triples: impl IntoIterator<Item = (U, I, Timestamp)>) -> Self
    where
        U: Into<String>,
        I: Into<String>,
    {
        let records = triples
            .into_iter()
            .enumerate()
            .map(|(seq, (u, i, t))| Interaction::new(u, i, t, seq as u64))
            .collect();
        Self::from_records(records)
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Interaction> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(t_min, t_max)`, or `None` for an empty log.
    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        Some((self.records.first()?.timestamp, self.records.last()?.timestamp))
    }

    /// Interactions with `t_lo <= timestamp < t_hi`, order preserved.
    pub fn slice(&self, t_lo: Timestamp, t_hi: Timestamp) -> InteractionLog {
        InteractionLog {
            records: self.slice_records(t_lo, t_hi).to_vec(),
        }
    }

    /// Borrowing variant of [`slice`](Self::slice).
    pub fn slice_records(&self, t_lo: Timestamp, t_hi: Timestamp) -> &[Interaction] {
        if t_hi <= t_lo {
            return &[];
        }
        let lo = self.records.partition_point(|r| r.timestamp < t_lo);
        let hi = self.records.partition_point(|r| r.timestamp < t_hi);
        &self.records[lo..hi]
    }

    /// Interactions with `t_lo <= timestamp <= t_hi`.
    pub fn slice_closed(&self, t_lo: Timestamp, t_hi: Timestamp) -> &[Interaction] {
        if t_hi < t_lo {
            return &[];
        }
        let lo = self.records.partition_point(|r| r.timestamp < t_lo);
        let hi = self.records.partition_point(|r| r.timestamp <= t_hi);
        &self.records[lo..hi]
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.user_id.as_str()).collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.item_id.as_str()).collect()
    }

    /// Writes the canonical CSV form: header `user_id,item_id,timestamp`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), IngestError> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["user_id", "item_id", "timestamp"])?;
        for r in &self.records {
            out.write_record([r.user_id.as_str(), r.item_id.as_str(), &r.timestamp.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

impl<'a> IntoIterator for &'a InteractionLog {
    type Item = &'a Interaction;
    type IntoIter = std::slice::Iter<'a, Interaction>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Source column, by zero-based position or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for ColumnRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => ColumnRef::Index(i),
            Err(_) => ColumnRef::Name(s.to_string()),
        })
    }
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "{i}"),
            ColumnRef::Name(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub user: ColumnRef,
    pub item: ColumnRef,
    pub timestamp: ColumnRef,
}

impl ColumnMapping {
    pub fn by_index(user: usize, item: usize, timestamp: usize) -> Self {
        ColumnMapping {
            user: ColumnRef::Index(user),
            item: ColumnRef::Index(item),
            timestamp: ColumnRef::Index(timestamp),
        }
    }
}

/// How to read one delimited interaction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    #[serde(default)]
    pub source_uri: String,
    pub column_mapping: ColumnMapping,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub header: bool,
}

fn default_delimiter() -> char {
    ','
}

impl DatasetDescriptor {
    /// The canonical serialized form produced by [`InteractionLog::write_csv`].
    pub fn canonical(name: impl Into<String>) -> Self {
        DatasetDescriptor {
            name: name.into(),
            source_uri: String::new(),
            column_mapping: ColumnMapping {
                user: ColumnRef::Name("user_id".into()),
                item: ColumnRef::Name("item_id".into()),
                timestamp: ColumnRef::Name("timestamp".into()),
            },
            delimiter: ',',
            header: true,
        }
    }

    /// MovieLens `u.data` layout: tab separated `user item rating timestamp`, no header.
    pub fn movielens_100k(source_uri: impl Into<String>) -> Self {
        DatasetDescriptor {
            name: "ml-100k".into(),
            source_uri: source_uri.into(),
            column_mapping: ColumnMapping::by_index(0, 1, 3),
            delimiter: '\t',
            header: false,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !self.delimiter.is_ascii() {
            return Err(IngestError::InvalidDescriptor(format!(
                "delimiter {:?} is not a single-byte character",
                self.delimiter
            )));
        }
        let m = &self.column_mapping;
        if m.user == m.item || m.user == m.timestamp || m.item == m.timestamp {
            return Err(IngestError::InvalidDescriptor(
                "user, item and timestamp must map to distinct columns".into(),
            ));
        }
        let named = [&m.user, &m.item, &m.timestamp]
            .iter()
            .any(|c| matches!(c, ColumnRef::Name(_)));
        if named && !self.header {
            return Err(IngestError::InvalidDescriptor(
                "columns referenced by name require a header row".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRejection {
    /// 1-based line number in the source.
    pub line: u64,
    pub reason: String,
}

/// Result of a successful ingest.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub log: InteractionLog,
    pub accepted: usize,
    pub rejected: usize,
    /// The first [`MAX_REPORTED_REJECTIONS`] rejected rows.
    pub rejections: Vec<RowRejection>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid dataset descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("header has no column named {0:?}")]
    MissingHeaderColumn(String),
    #[error("dataset has no valid rows ({rejected} rejected)")]
    EmptyDataset {
        rejected: usize,
        rejections: Vec<RowRejection>,
    },
    #[error("{rejected} of {total} rows rejected; more than half of the input is malformed")]
    TooManyRejections {
        rejected: usize,
        total: usize,
        rejections: Vec<RowRejection>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::InvalidDescriptor(_) => "InvalidDescriptor",
            IngestError::MissingHeaderColumn(_) => "MissingHeaderColumn",
            IngestError::EmptyDataset { .. } => "EmptyDataset",
            IngestError::TooManyRejections { .. } => "TooManyRejections",
            IngestError::Io(_) | IngestError::Csv(_) => "Io",
        }
    }
}

struct ResolvedColumns {
    user: usize,
    item: usize,
    timestamp: usize,
}

fn resolve(col: &ColumnRef, header: Option<&HashMap<&str, usize>>) -> Result<usize, IngestError> {
    match col {
        ColumnRef::Index(i) => Ok(*i),
        ColumnRef::Name(name) => header
            .and_then(|h| h.get(name.as_str()).copied())
            .ok_or_else(|| IngestError::MissingHeaderColumn(name.clone())),
    }
}

/// Reads delimited rows into a sorted [`InteractionLog`].
///
/// Malformed rows are counted and reported by line number; the ingest fails
/// when no row is valid or when more than half of the rows are rejected.
pub fn ingest<R: Read>(descriptor: &DatasetDescriptor, source: R) -> Result<Ingested, IngestError> {
    descriptor.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(descriptor.delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .from_reader(source);

    let mut records = reader.records();
    let columns = if descriptor.header {
        let header = match records.next() {
            Some(row) => row?,
            None => {
                return Err(IngestError::EmptyDataset {
                    rejected: 0,
                    rejections: Vec::new(),
                })
            }
        };
        let names: HashMap<&str, usize> = header.iter().enumerate().map(|(i, n)| (n.trim(), i)).collect();
        let m = &descriptor.column_mapping;
        ResolvedColumns {
            user: resolve(&m.user, Some(&names))?,
            item: resolve(&m.item, Some(&names))?,
            timestamp: resolve(&m.timestamp, Some(&names))?,
        }
    } else {
        let m = &descriptor.column_mapping;
        ResolvedColumns {
            user: resolve(&m.user, None)?,
            item: resolve(&m.item, None)?,
            timestamp: resolve(&m.timestamp, None)?,
        }
    };

    let mut accepted = Vec::new();
    let mut rejected = 0usize;
    let mut rejections = Vec::new();
    let mut reject = |line: u64, reason: String| {
        rejected += 1;
        if rejections.len() < MAX_REPORTED_REJECTIONS {
            rejections.push(RowRejection { line, reason });
        }
    };

    for (seq, row) in records.enumerate() {
        let row = match row {
            Ok(row) => row,
            Err(err) => {
                let line = err.position().map(|p| p.line()).unwrap_or(0);
                match err.kind() {
                    csv::ErrorKind::Io(_) => return Err(err.into()),
                    _ => {
                        reject(line, err.to_string());
                        continue;
                    }
                }
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize, what: &str| -> Result<&str, String> {
            match row.get(idx) {
                Some(v) if !v.trim().is_empty() => Ok(v.trim()),
                _ => Err(format!("missing {what} column {idx}")),
            }
        };
        let parsed = (|| {
            let user = field(columns.user, "user")?;
            let item = field(columns.item, "item")?;
            let raw_ts = field(columns.timestamp, "timestamp")?;
            let ts: Timestamp = raw_ts
                .parse()
                .map_err(|_| format!("timestamp {raw_ts:?} is not an integer"))?;
            if ts < 0 {
                return Err(format!("timestamp {ts} is negative"));
            }
            Ok(Interaction::new(user, item, ts, seq as u64))
        })();
        match parsed {
            Ok(interaction) => accepted.push(interaction),
            Err(reason) => reject(line, reason),
        }
    }

    let total = accepted.len() + rejected;
    if accepted.is_empty() {
        return Err(IngestError::EmptyDataset { rejected, rejections });
    }
    if rejected * 2 > total {
        return Err(IngestError::TooManyRejections {
            rejected,
            total,
            rejections,
        });
    }
    let n = accepted.len();
    Ok(Ingested {
        log: InteractionLog::from_records(accepted),
        accepted: n,
        rejected,
        rejections,
    })
}
