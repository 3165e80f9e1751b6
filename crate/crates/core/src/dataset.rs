//! Loading advertisement records, topic classification and the seeded
//! evaluation split.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_action_reason, AdClass, AdRecord, ImageError, ImageRef, Provenance, TopicVote};

/// Records keep at most this many statements.
pub const MAX_STATEMENTS: usize = 5;
/// A topic counts only when at least this many annotators chose it.
pub const MIN_TOPIC_VOTES: u32 = 2;
pub const DEFAULT_PSA_TARGET: usize = 250;
pub const DEFAULT_COMMERCIAL_TARGET: usize = 300;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: line {line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("topic map lists {0:?} as both commercial and PSA")]
    OverlappingTopics(Vec<String>),
    #[error("topic map: {0}")]
    TopicMapFormat(String),
}

/// Line-delimited record schema of the dataset export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub image_path: String,
    pub statements: Vec<String>,
    #[serde(default)]
    pub topics: Vec<TopicVote>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordWarning {
    pub record_id: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<AdRecord>,
    pub warnings: Vec<RecordWarning>,
}

/// Loads a line-delimited dataset export. Image paths are resolved relative
/// to the dataset file and hashed on load.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset, DatasetError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: shown.clone(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DatasetError::Schema {
            path: shown.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::Schema {
                path: shown.clone(),
                line: line_no,
                message: format!("duplicate record id {:?}", raw.id),
            });
        }
        if let Some(v) = raw.topics.iter().find(|t| t.votes == 0) {
            return Err(DatasetError::Schema {
                path: shown.clone(),
                line: line_no,
                message: format!("topic {:?} has zero votes", v.topic),
            });
        }

        let mut warn = |message: String| {
            warnings.push(RecordWarning {
                record_id: raw.id.clone(),
                line: line_no,
                message,
            })
        };
        let mut statements = Vec::new();
        for s in &raw.statements {
            match parse_action_reason(s) {
                Ok(ar) => statements.push(ar),
                Err(e) => warn(e.to_string()),
            }
        }
        if statements.len() > MAX_STATEMENTS {
            warn(format!(
                "{} statements, keeping the first {MAX_STATEMENTS}",
                statements.len()
            ));
            statements.truncate(MAX_STATEMENTS);
        }
        if statements.is_empty() {
            warn("no parseable statements, record dropped".into());
            continue;
        }

        let image_path = resolve(&base, &raw.image_path);
        let image = ImageRef::from_path(&image_path, raw.provenance).map_err(|e| match e {
            ImageError::Io { source, .. } => DatasetError::Io {
                path: image_path.display().to_string(),
                source,
            },
            other => DatasetError::Schema {
                path: shown.clone(),
                line: line_no,
                message: other.to_string(),
            },
        })?;

        records.push(AdRecord {
            id: raw.id,
            image,
            statements,
            topic_votes: raw.topics,
            ad_class: AdClass::Unclassified,
        });
    }

    if records.is_empty() {
        return Err(DatasetError::Schema {
            path: shown,
            line: 0,
            message: "dataset contains no usable records".into(),
        });
    }
    Ok(LoadedDataset { records, warnings })
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Topic names that mark a record as commercial or as a public service
/// announcement. Matching is case-insensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMap {
    pub commercial_topics: BTreeSet<String>,
    pub psa_topics: BTreeSet<String>,
}

impl TopicMap {
    pub fn new<I, J, S, T>(commercial: I, psa: J) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let norm = |s: &str| s.trim().to_lowercase();
        let map = Self {
            commercial_topics: commercial.into_iter().map(|s| norm(s.as_ref())).collect(),
            psa_topics: psa.into_iter().map(|s| norm(s.as_ref())).collect(),
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let overlap: Vec<String> = self
            .commercial_topics
            .intersection(&self.psa_topics)
            .cloned()
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::OverlappingTopics(overlap))
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, DatasetError> {
        let raw: TopicMap = toml::from_str(s).map_err(|e| DatasetError::TopicMapFormat(e.to_string()))?;
        Self::new(raw.commercial_topics, raw.psa_topics)
    }

    pub fn from_json_str(s: &str) -> Result<Self, DatasetError> {
        let raw: TopicMap =
            serde_json::from_str(s).map_err(|e| DatasetError::TopicMapFormat(e.to_string()))?;
        Self::new(raw.commercial_topics, raw.psa_topics)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    fn is_commercial(&self, topic: &str) -> bool {
        self.commercial_topics.contains(&topic.trim().to_lowercase())
    }

    fn is_psa(&self, topic: &str) -> bool {
        self.psa_topics.contains(&topic.trim().to_lowercase())
    }
}

/// Classifies from topics chosen by at least two annotators. A record whose
/// qualifying topics fall in both classes is left unclassified.
pub fn classify_topic(topic_votes: &[TopicVote], map: &TopicMap) -> AdClass {
    let qualifying = topic_votes.iter().filter(|t| t.votes >= MIN_TOPIC_VOTES);
    let (mut psa, mut com) = (false, false);
    for t in qualifying {
        psa |= map.is_psa(&t.topic);
        com |= map.is_commercial(&t.topic);
    }
    match (psa, com) {
        (true, false) => AdClass::Psa,
        (false, true) => AdClass::Commercial,
        _ => AdClass::Unclassified,
    }
}

pub fn classify_records(records: &mut [AdRecord], map: &TopicMap) {
    for r in records {
        r.ad_class = classify_topic(&r.topic_votes, map);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSplit {
    pub psa: Vec<AdRecord>,
    pub commercial: Vec<AdRecord>,
    pub seed: u64,
}

impl EvalSplit {
    /// All sampled records, sorted by id.
    pub fn records(&self) -> Vec<&AdRecord> {
        let mut all: Vec<&AdRecord> = self.psa.iter().chain(&self.commercial).collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }
}

/// Draws up to `n_psa` PSA and `n_com` commercial records uniformly without
/// replacement.
///
/// Candidates are sorted by id first so the draw does not depend on file
/// order. Each class is sampled with its own ChaCha8 stream seeded from
/// `seed` (PSA with `seed`, commercial with `seed + 1`) using
/// `rand::seq::index::sample`. A class with fewer candidates than requested
/// is taken whole.
pub fn sample_eval_split(records: &[AdRecord], n_psa: usize, n_com: usize, seed: u64) -> EvalSplit {
    EvalSplit {
        psa: sample_class(records, AdClass::Psa, n_psa, seed),
        commercial: sample_class(records, AdClass::Commercial, n_com, seed.wrapping_add(1)),
        seed,
    }
}

fn sample_class(records: &[AdRecord], class: AdClass, n: usize, seed: u64) -> Vec<AdRecord> {
    let mut pool: Vec<&AdRecord> = records.iter().filter(|r| r.ad_class == class).collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    if pool.len() <= n {
        return pool.into_iter().cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}
