//! Durable reading store: one NDJSON file per UTC day plus an in-memory index.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, Subscription, TopicFilter};
use crate::model::{validate_reading, MeterReading};

pub const CSV_HEADER: &str = "timestamp,device_id,technology,medium,quantity,value,unit,rssi_dbm";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid reading: {0}")]
    InvalidReading(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("corrupt day file {path}, line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReading {
    pub seq: u64,
    #[serde(flatten)]
    pub reading: MeterReading,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub device_id: String,
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
    /// Bucket width in seconds; keeps the last reading of each bucket.
    pub bucket_s: Option<i64>,
}

impl Query {
    pub fn new(device_id: &str, from: DateTime<Utc>, to: DateTime<Utc>) -> Query {
        Query {
            device_id: device_id.to_string(),
            from,
            to,
            bucket_s: None,
        }
    }

    pub fn with_bucket(mut self, bucket_s: i64) -> Query {
        self.bucket_s = Some(bucket_s);
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.from >= self.to {
            return Err(StoreError::InvalidQuery("from must be before to".into()));
        }
        if matches!(self.bucket_s, Some(b) if b <= 0) {
            return Err(StoreError::InvalidQuery("bucket must be positive".into()));
        }
        Ok(())
    }
}

type DedupKey = (String, i64, u64);

fn dedup_key(r: &MeterReading) -> DedupKey {
    (r.device_id.clone(), r.timestamp.timestamp(), r.value.to_bits())
}

#[derive(Default)]
struct Index {
    next_seq: u64,
    /// Per device, sorted by (timestamp, seq).
    by_device: HashMap<String, Vec<StoredReading>>,
    seen: HashMap<DedupKey, u64>,
}

impl Index {
    fn insert(&mut self, stored: StoredReading) {
        self.seen.insert(dedup_key(&stored.reading), stored.seq);
        self.next_seq = self.next_seq.max(stored.seq + 1);
        let list = self.by_device.entry(stored.reading.device_id.clone()).or_default();
        let key = (stored.reading.timestamp, stored.seq);
        let pos = list.partition_point(|s| (s.reading.timestamp, s.seq) <= key);
        list.insert(pos, stored);
    }
}

pub struct Store {
    root: PathBuf,
    index: RwLock<Index>,
    writer: Mutex<HashMap<NaiveDate, File>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

fn day_path(root: &Path, day: NaiveDate) -> PathBuf {
    root.join(format!("{}.ndjson", day.format("%Y-%m-%d")))
}

fn is_day_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "ndjson")
        && path
            .file_stem()
            .and_then(|s| s.to_str())
            .is_some_and(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok())
}

/// Load one day file. A final line that does not parse is a torn write from
/// a crash: it was never acknowledged, so it is cut off.
fn load_day_file(path: &Path, index: &mut Index) -> Result<(), StoreError> {
    let mut file = OpenOptions::new().read(true).write(true).open(path)?;
    let mut reader = BufReader::new(&mut file);
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut line_no = 0;
    let mut torn = None;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = line.ends_with('\n');
        match serde_json::from_str::<StoredReading>(line.trim_end()) {
            Ok(stored) if complete => {
                index.insert(stored);
                good_len += n as u64;
            }
            result => {
                let reason = match result {
                    Err(e) => e.to_string(),
                    Ok(_) => "missing newline".to_string(),
                };
                torn = Some((line_no, reason));
                // anything after a bad line means it was not the last write
                let mut rest = String::new();
                if reader.read_line(&mut rest)? > 0 {
                    let (line, reason) = torn.take().unwrap();
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line,
                        reason,
                    });
                }
                break;
            }
        }
    }
    if let Some((line, reason)) = torn {
        log::warn!(
            "dropping torn final line {line} of {}: {reason}",
            path.display()
        );
        file.set_len(good_len)?;
        file.seek(SeekFrom::End(0))?;
        file.sync_all()?;
    }
    Ok(())
}

impl Store {
    /// Open (or create) a store rooted at `root`, rebuilding the index from
    /// the day files found there.
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_day_file(p))
            .collect();
        paths.sort();
        let mut index = Index {
            next_seq: 1,
            ..Index::default()
        };
        for path in &paths {
            load_day_file(path, &mut index)?;
        }
        Ok(Store {
            root,
            index: RwLock::new(index),
            writer: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Sync every open day file, metadata included.
    pub fn flush(&self) -> Result<(), StoreError> {
        let files = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        for file in files.values() {
            file.sync_all()?;
        }
        Ok(())
    }

    /// Append a reading, durable on return. A reading with the same
    /// (device_id, timestamp, value) as a stored one returns the stored seq.
    pub fn append(&self, reading: &MeterReading) -> Result<u64, StoreError> {
        if let Err(violations) = validate_reading(reading) {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(StoreError::InvalidReading(text.join("; ")));
        }
        let mut files = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let key = dedup_key(reading);
        let seq = {
            let index = self.index.read().unwrap();
            if let Some(&seq) = index.seen.get(&key) {
                return Ok(seq);
            }
            index.next_seq
        };
        let stored = StoredReading {
            seq,
            reading: reading.clone(),
        };
        let mut line = serde_json::to_string(&stored).expect("reading serializes");
        line.push('\n');
        let day = reading.timestamp.date_naive();
        let file = match files.entry(day) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(day_path(&self.root, day))?,
            ),
        };
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.index.write().unwrap().insert(stored);
        Ok(seq)
    }

    pub fn query(&self, q: &Query) -> Result<Vec<StoredReading>, StoreError> {
        q.validate()?;
        let index = self.index.read().unwrap();
        let Some(list) = index.by_device.get(&q.device_id) else {
            return Ok(Vec::new());
        };
        let start = list.partition_point(|s| s.reading.timestamp < q.from);
        let end = list.partition_point(|s| s.reading.timestamp < q.to);
        let in_range = &list[start..end];
        let Some(bucket) = q.bucket_s else {
            return Ok(in_range.to_vec());
        };
        let mut out: Vec<StoredReading> = Vec::new();
        let mut current = None;
        for s in in_range {
            let b = (s.reading.timestamp - q.from).num_seconds() / bucket;
            if current == Some(b) {
                *out.last_mut().unwrap() = s.clone();
            } else {
                out.push(s.clone());
                current = Some(b);
            }
        }
        Ok(out)
    }

    pub fn latest(&self, device_id: &str) -> Option<StoredReading> {
        let index = self.index.read().unwrap();
        index.by_device.get(device_id)?.last().cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn devices(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.index.read().unwrap().by_device.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn export_csv(&self, q: &Query) -> Result<String, StoreError> {
        Ok(to_csv(&self.query(q)?))
    }
}

pub fn to_csv(rows: &[StoredReading]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(',')).unwrap();
    for s in rows {
        let r = &s.reading;
        w.write_record([
            crate::model::timestamp::format(&r.timestamp),
            r.device_id.clone(),
            r.technology.to_string(),
            r.medium.as_str().to_string(),
            r.quantity.as_str().to_string(),
            r.value.to_string(),
            r.unit.as_str().to_string(),
            r.link.rssi_dbm.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Append every reading published under `meterhub/readings/#`.
pub fn attach(store: Arc<Store>, bus: &Bus) -> Subscription {
    let filter = TopicFilter::new("meterhub/readings/#").unwrap();
    bus.subscribe(filter, move |msg| {
        let reading = match msg.body_str().map(MeterReading::from_json) {
            Some(Ok(r)) => r,
            _ => {
                log::warn!("store: ignoring unparseable message on {}", msg.topic);
                return;
            }
        };
        if let Err(e) = store.append(&reading) {
            log::error!("store: append failed for {}: {e}", reading.device_id);
        }
    })
}
