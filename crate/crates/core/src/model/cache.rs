use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{Sentence, TokenId};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    key: String,
    model: String,
    src: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyp: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tgt: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nll: Option<f64>,
}

#[derive(Debug, Clone)]
enum Value {
    Hyp(Sentence),
    Nll(f64),
}

impl Record {
    fn into_entry(self) -> Result<(String, String, Value)> {
        let src = Sentence::new(self.src)?;
        let (key, value) = match (self.hyp, self.tgt, self.nll) {
            (Some(hyp), None, None) => (DecodeCache::key(&self.model, &src), Value::Hyp(Sentence::new(hyp)?)),
            (None, Some(tgt), Some(nll)) => {
                (DecodeCache::nll_key(&self.model, &src, &Sentence::new(tgt)?), Value::Nll(nll))
            }
            _ => return Err(Error::Format("cache record is neither a decode nor a loss".into())),
        };
        if key != self.key {
            return Err(Error::Format("cache record key mismatch".into()));
        }
        Ok((key, self.model, value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Content-addressed store of decoded hypotheses and sentence losses.
///
/// Entries are keyed by a SHA-256 of the model id and the token ids. When
/// backed by a file, every new entry is appended as one JSON line; on open
/// the log is replayed and a torn trailing line is cut off.
pub struct DecodeCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, (String, Value)>>,
    log: Option<Mutex<BufWriter<File>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl DecodeCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            log: None,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;

        let mut entries = HashMap::new();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        for chunk in raw.split_inclusive(|&b| b == b'\n') {
            let complete = chunk.ends_with(b"\n");
            let parsed = serde_json::from_slice::<Record>(chunk);
            match (complete, parsed) {
                (true, Ok(rec)) => {
                    let (key, model, value) = rec
                        .into_entry()
                        .map_err(|e| Error::Format(format!("{}: byte {offset}: {e}", path.display())))?;
                    entries.insert(key, (model, value));
                    good_len = offset + chunk.len();
                }
                (false, _) => break,
                (true, Err(e)) => {
                    // Only a torn final record is tolerated.
                    if offset + chunk.len() == raw.len() {
                        break;
                    }
                    return Err(Error::Format(format!(
                        "{}: corrupt record at byte {offset}: {e}",
                        path.display()
                    )));
                }
            }
            offset += chunk.len();
        }
        if good_len < raw.len() {
            log::warn!(
                "{}: dropping {} bytes of torn trailing record",
                path.display(),
                raw.len() - good_len
            );
            file.set_len(good_len as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            log: Some(Mutex::new(BufWriter::new(file))),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn key(model_id: &str, src: &Sentence) -> String {
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        h.update([0u8]);
        for id in src.ids() {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Key of the loss of `tgt` given `src`; disjoint from decode keys.
    pub fn nll_key(model_id: &str, src: &Sentence, tgt: &Sentence) -> String {
        let mut h = Sha256::new();
        h.update(model_id.as_bytes());
        h.update([0u8, b'n']);
        h.update((src.len() as u64).to_le_bytes());
        for id in src.ids().iter().chain(tgt.ids()) {
            h.update(id.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn lookup(&self, key: &str, model_id: &str) -> Option<Value> {
        let found = self
            .entries
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .filter(|(m, _)| m == model_id)
            .map(|(_, v)| v.clone());
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    fn store(&self, key: String, model_id: &str, record: Record, value: Value) -> Result<()> {
        let mut entries = self.entries.write().expect("cache lock poisoned");
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(log) = &self.log {
            let mut w = log.lock().expect("cache log lock poisoned");
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        entries.insert(key, (model_id.to_string(), value));
        Ok(())
    }

    /// Looks up a hypothesis, counting a hit or a miss.
    pub fn get(&self, model_id: &str, src: &Sentence) -> Option<Sentence> {
        match self.lookup(&Self::key(model_id, src), model_id) {
            Some(Value::Hyp(h)) => Some(h),
            _ => None,
        }
    }

    pub fn insert(&self, model_id: &str, src: &Sentence, hyp: &Sentence) -> Result<()> {
        let key = Self::key(model_id, src);
        let record = Record {
            key: key.clone(),
            model: model_id.to_string(),
            src: src.ids().to_vec(),
            hyp: Some(hyp.ids().to_vec()),
            tgt: None,
            nll: None,
        };
        self.store(key, model_id, record, Value::Hyp(hyp.clone()))
    }

    pub fn get_nll(&self, model_id: &str, src: &Sentence, tgt: &Sentence) -> Option<f64> {
        match self.lookup(&Self::nll_key(model_id, src, tgt), model_id) {
            Some(Value::Nll(v)) => Some(v),
            _ => None,
        }
    }

    /// Stores a loss; non-finite values are not representable in the log
    /// and are skipped.
    pub fn insert_nll(&self, model_id: &str, src: &Sentence, tgt: &Sentence, nll: f64) -> Result<()> {
        if !nll.is_finite() {
            return Ok(());
        }
        let key = Self::nll_key(model_id, src, tgt);
        let record = Record {
            key: key.clone(),
            model: model_id.to_string(),
            src: src.ids().to_vec(),
            hyp: None,
            tgt: Some(tgt.ids().to_vec()),
            nll: Some(nll),
        };
        self.store(key, model_id, record, Value::Nll(nll))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.len(),
        }
    }

    pub fn reset_stats(&self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}
