//! Scoring runs and their persisted results.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cite::{score_cite, CiteConfig};
use crate::creativity::{score_creativity, CreativityConfig};
use crate::gateway::GatewayStats;
use crate::model::{AdClass, AdRecord, Provenance, ScoreCard};
use crate::models::Models;
use crate::persuasion::score_persuasiveness;
use crate::prompts;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Metrics selected for a run. CITE is always computed since the other two
/// depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub cite: bool,
    pub creativity: bool,
    pub pa: bool,
}

impl Default for MetricSet {
    fn default() -> Self {
        Self {
            cite: true,
            creativity: true,
            pa: true,
        }
    }
}

impl MetricSet {
    /// Parses a comma list of `cite`, `creativity` (or `c_obj`) and `pa`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut m = MetricSet {
            cite: true,
            creativity: false,
            pa: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "cite" => {}
                "creativity" | "c_obj" | "cobj" => m.creativity = true,
                "pa" | "persuasiveness" => m.pa = true,
                other => return Err(format!("unknown metric {other:?}")),
            }
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        let mut v = vec!["cite"];
        if self.creativity {
            v.push("creativity");
        }
        if self.pa {
            v.push("pa");
        }
        v.join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub cite: CiteConfig,
    pub creativity: CreativityConfig,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPair {
    pub record_id: String,
    pub statement_index: usize,
    pub error: String,
}

/// Scores one (image, statement) pair with every selected metric.
pub async fn score_pair(models: &Models, cfg: &ScoringConfig, record: &AdRecord, index: usize) -> Result<ScoreCard, String> {
    let ar = &record.statements[index];
    let cite = score_cite(models, &record.image, ar, &cfg.cite)
        .await
        .map_err(|e| format!("cite: {e}"))?;
    let creativity = async {
        if cfg.metrics.creativity {
            score_creativity(models, &record.image, ar, &cite, &cfg.creativity)
                .await
                .map(Some)
                .map_err(|e| format!("creativity: {e}"))
        } else {
            Ok(None)
        }
    };
    let persuasion = async {
        if cfg.metrics.pa {
            score_persuasiveness(models, ar, &cite)
                .await
                .map(Some)
                .map_err(|e| format!("pa: {e}"))
        } else {
            Ok(None)
        }
    };
    let (creativity, persuasion) = futures::try_join!(creativity, persuasion)?;
    Ok(ScoreCard {
        record_id: record.id.clone(),
        statement_index: index,
        cite: cite.cite,
        cite_action: cite.cite_action,
        cite_reason: cite.cite_reason,
        c_obj: creativity.map(|c| c.c_obj),
        components: persuasion.as_ref().map(|p| p.values()),
        pa: persuasion.as_ref().map(|p| p.pa),
        pc: persuasion.as_ref().map(|p| p.pc),
        text_only: cite.text_only,
        generated_ar: cite.generated_ar,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringOutcome {
    /// Cards sorted by record id then statement index.
    pub cards: Vec<ScoreCard>,
    pub failures: Vec<FailedPair>,
    pub stats: GatewayStats,
}

impl ScoringOutcome {
    pub fn attempted(&self) -> usize {
        self.cards.len() + self.failures.len()
    }

    pub fn failure_rate(&self) -> f64 {
        match self.attempted() {
            0 => 0.0,
            n => self.failures.len() as f64 / n as f64,
        }
    }
}

/// Scores every statement of every record concurrently. Parallelism on the
/// wire is bounded by the gateway limiter; results do not depend on
/// completion order.
pub async fn run_scoring(models: &Models, cfg: &ScoringConfig, records: &[&AdRecord]) -> ScoringOutcome {
    let jobs = records
        .iter()
        .flat_map(|r| (0..r.statements.len()).map(move |i| (*r, i)))
        .map(|(r, i)| async move { (r.id.clone(), i, score_pair(models, cfg, r, i).await) });
    let mut results = join_all(jobs).await;
    results.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    let mut cards = Vec::new();
    let mut failures = Vec::new();
    for (record_id, statement_index, r) in results {
        match r {
            Ok(card) => cards.push(card),
            Err(error) => {
                tracing::warn!(%record_id, statement_index, %error, "pair failed");
                failures.push(FailedPair {
                    record_id,
                    statement_index,
                    error,
                })
            }
        }
    }
    ScoringOutcome {
        cards,
        failures,
        stats: models.gateway.stats(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub ad_class: AdClass,
    pub provenance: Provenance,
    pub statements: usize,
}

/// Run manifest. `digest` covers everything that determines the scores and
/// none of the timestamps, so equal digests mean comparable runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub digest: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub prompt_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub metrics: MetricSet,
    pub records: BTreeMap<String, RecordMeta>,
    pub started_at: String,
    pub finished_at: String,
}

impl Manifest {
    pub fn new(
        config_digest: String,
        dataset_digest: String,
        seed: u64,
        metrics: MetricSet,
        records: BTreeMap<String, RecordMeta>,
    ) -> Self {
        let prompt_digests: BTreeMap<String, String> =
            prompts::digests().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        #[derive(Serialize)]
        struct Material<'a> {
            config_digest: &'a str,
            dataset_digest: &'a str,
            prompt_digests: &'a BTreeMap<String, String>,
            seed: u64,
            metrics: MetricSet,
            records: &'a BTreeMap<String, RecordMeta>,
        }
        let material = serde_json::to_vec(&Material {
            config_digest: &config_digest,
            dataset_digest: &dataset_digest,
            prompt_digests: &prompt_digests,
            seed,
            metrics,
            records: &records,
        })
        .expect("json");
        let now = chrono::Utc::now().to_rfc3339();
        Self {
            digest: hex::encode(Sha256::digest(material)),
            config_digest,
            dataset_digest,
            prompt_digests,
            seed,
            metrics,
            records,
            started_at: now.clone(),
            finished_at: now,
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub const SCORES_FILE: &str = "scores.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURES_FILE: &str = "failures.json";

/// Score cards plus the manifest of the run that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultStore {
    pub manifest: Manifest,
    pub cards: Vec<ScoreCard>,
    pub failures: Vec<FailedPair>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl ResultStore {
    /// Appends the run's cards to `scores.jsonl` in `dir`, keeping the file
    /// sorted and free of duplicate (record, statement) keys, and rewrites
    /// the manifest and failure report.
    pub fn persist(&self, dir: &Path) -> Result<(), StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let scores = dir.join(SCORES_FILE);
        let mut merged: BTreeMap<(String, usize), ScoreCard> = BTreeMap::new();
        if scores.exists() && manifest_digest(dir)?.as_deref() == Some(&self.manifest.digest) {
            for c in read_cards(&scores)? {
                merged.insert((c.record_id.clone(), c.statement_index), c);
            }
        }
        for c in &self.cards {
            merged.insert((c.record_id.clone(), c.statement_index), c.clone());
        }
        let mut buf = String::new();
        for c in merged.values() {
            buf.push_str(&serde_json::to_string(c).expect("card serializes"));
            buf.push('\n');
        }
        write_atomic(&scores, buf.as_bytes())?;
        let failures = serde_json::to_string_pretty(&self.failures).expect("json");
        write_atomic(&dir.join(FAILURES_FILE), failures.as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("json");
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Format {
            path: mpath.display().to_string(),
            message: e.to_string(),
        })?;
        let cards = read_cards(&dir.join(SCORES_FILE))?;
        let fpath = dir.join(FAILURES_FILE);
        let failures = match fs::read_to_string(&fpath) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| StoreError::Format {
                path: fpath.display().to_string(),
                message: e.to_string(),
            })?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            manifest,
            cards,
            failures,
        })
    }
}

fn manifest_digest(dir: &Path) -> Result<Option<String>, StoreError> {
    let p = dir.join(MANIFEST_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v["digest"].as_str().map(str::to_string)))
}

pub fn read_cards(path: &Path) -> Result<Vec<ScoreCard>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Format {
                path: format!("{}:{}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn record_meta(records: &[&AdRecord]) -> BTreeMap<String, RecordMeta> {
    records
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                RecordMeta {
                    ad_class: r.ad_class,
                    provenance: r.image.provenance,
                    statements: r.statements.len(),
                },
            )
        })
        .collect()
}
