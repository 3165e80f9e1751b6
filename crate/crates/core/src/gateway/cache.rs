use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::Reply;

/// One persisted response, stored as `<cache dir>/<key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: Reply,
    pub created_at: DateTime<Utc>,
}

/// Response cache with an in-memory layer over an optional directory of
/// key-named files.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, Reply>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            mem: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => std::fs::read_dir(dir)
                .map(|it| {
                    it.filter_map(Result::ok)
                        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                        .count()
                })
                .unwrap_or(0),
            None => self.mem.read().expect("cache poisoned").len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Reply>, String> {
        if let Some(r) = self.mem.read().expect("cache poisoned").get(key) {
            return Ok(Some(r.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = Self::path_for(dir, key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(format!("{}: {e}", path.display())),
        };
        let entry: CacheEntry =
            serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        if entry.key != key {
            return Err(format!("{}: key mismatch", path.display()));
        }
        self.mem
            .write()
            .expect("cache poisoned")
            .insert(key.to_string(), entry.response.clone());
        Ok(Some(entry.response))
    }

    /// Stores a response. Disk writes go through a temporary file and a
    /// rename so readers never see a partial entry.
    pub fn put(&self, key: &str, reply: &Reply) -> Result<(), String> {
        if let Some(dir) = &self.dir {
            let entry = CacheEntry {
                key: key.to_string(),
                response: reply.clone(),
                created_at: Utc::now(),
            };
            let path = Self::path_for(dir, key);
            let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
            let bytes = serde_json::to_vec(&entry).map_err(|e| e.to_string())?;
            std::fs::write(&tmp, bytes).map_err(|e| format!("{}: {e}", tmp.display()))?;
            std::fs::rename(&tmp, &path).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        self.mem
            .write()
            .expect("cache poisoned")
            .insert(key.to_string(), reply.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = vec![0.1, 1.0 / 3.0, std::f64::consts::FRAC_1_SQRT_2, -2.5e-300];
        {
            let c = ResponseCache::on_disk(dir.path()).unwrap();
            c.put("k1", &Reply::Vector(v.clone())).unwrap();
            c.put("k2", &Reply::Text("hello".into())).unwrap();
            assert_eq!(c.len(), 2);
        }
        let c = ResponseCache::on_disk(dir.path()).unwrap();
        match c.get("k1").unwrap() {
            Some(Reply::Vector(w)) => {
                assert!(v.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()))
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.get("k2").unwrap(), Some(Reply::Text("hello".into())));
        assert_eq!(c.get("missing").unwrap(), None);
    }
}
