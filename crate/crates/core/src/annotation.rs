//! Human pairwise annotation: pair preparation, the submission store behind
//! the annotation API, and the JSON shapes exchanged with the web client.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{AnnotationRecord, Criterion, PairSpec, Side};
use crate::model::{ActionReason, AdRecord, ImageRef};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("pair {pair_id} references unknown record {record_id}")]
    UnknownRecord { pair_id: String, record_id: String },
    #[error("pair {0} uses the same image on both sides")]
    SameImage(String),
    #[error("duplicate pair id {0}")]
    DuplicatePair(String),
    #[error("submission must answer each of the 10 criteria exactly once: {0}")]
    Incomplete(String),
    #[error("annotator {annotator} already submitted pair {pair_id}")]
    Duplicate { pair_id: String, annotator: String },
    #[error("pair {0} already has two annotators")]
    PairFull(String),
    #[error("annotator {0} reached the pair quota")]
    QuotaExceeded(String),
    #[error("empty session token")]
    EmptySession,
    #[error("annotation log {path}: {message}")]
    Log { path: String, message: String },
}

/// Annotators per pair.
pub const ANNOTATORS_PER_PAIR: usize = 2;

/// A pair as presented: `left`/`right` are in presentation order, and
/// `shuffled` records whether that order is swapped relative to the
/// canonical [`PairSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAssignment {
    pub pair_id: String,
    pub left: ImageRef,
    pub right: ImageRef,
    pub statements: Vec<ActionReason>,
    pub shuffled: bool,
}

impl PairAssignment {
    /// Maps a presented side back to the canonical orientation.
    pub fn canonical(&self, presented: Side) -> Side {
        if self.shuffled {
            presented.flip()
        } else {
            presented
        }
    }
}

/// Builds presentation pairs with a seeded left/right shuffle. The shuffle
/// bit for each pair depends only on the seed and the pair's position in
/// id order.
pub fn prepare_pairs(
    specs: &[PairSpec],
    records: &BTreeMap<String, AdRecord>,
    seed: u64,
) -> Result<Vec<PairAssignment>, AnnotationError> {
    let mut sorted: Vec<&PairSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(sorted.len());
    for spec in sorted {
        if !seen.insert(spec.pair_id.clone()) {
            return Err(AnnotationError::DuplicatePair(spec.pair_id.clone()));
        }
        let get = |id: &str| {
            records.get(id).ok_or_else(|| AnnotationError::UnknownRecord {
                pair_id: spec.pair_id.clone(),
                record_id: id.to_string(),
            })
        };
        let (l, r) = (get(&spec.left_record)?, get(&spec.right_record)?);
        if l.image.content_hash == r.image.content_hash {
            return Err(AnnotationError::SameImage(spec.pair_id.clone()));
        }
        let mut statements = l.statements.clone();
        for s in &r.statements {
            if !statements.iter().any(|x| x.statement == s.statement) {
                statements.push(s.clone());
            }
        }
        let shuffled: bool = rng.random();
        let (left, right) = if shuffled {
            (r.image.clone(), l.image.clone())
        } else {
            (l.image.clone(), r.image.clone())
        };
        out.push(PairAssignment {
            pair_id: spec.pair_id.clone(),
            left,
            right,
            statements,
            shuffled,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionChoice {
    pub criterion: Criterion,
    pub choice: Side,
}

/// Body of `POST /pairs/{id}/annotations`; sides are as presented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub session: String,
    pub choices: Vec<CriterionChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionView {
    pub id: Criterion,
    pub label: String,
}

/// What the client sees of a pair. Carries no provenance or orientation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairView {
    pub pair_id: String,
    pub left_image: String,
    pub right_image: String,
    pub statements: Vec<String>,
    pub criteria: Vec<CriterionView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
}

impl PairView {
    pub fn of(pair: &PairAssignment, progress: Option<Progress>) -> Self {
        Self {
            pair_id: pair.pair_id.clone(),
            left_image: format!("/pairs/{}/images/left", pair.pair_id),
            right_image: format!("/pairs/{}/images/right", pair.pair_id),
            statements: pair.statements.iter().map(|s| s.statement.clone()).collect(),
            criteria: Criterion::ALL
                .iter()
                .map(|&c| CriterionView {
                    id: c,
                    label: c.label().to_string(),
                })
                .collect(),
            progress,
        }
    }
}

/// Acknowledgement of an accepted submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub pair_id: String,
    pub records: usize,
    pub pair_complete: bool,
    pub progress: Progress,
}

/// Submission state. Records are appended to an optional JSONL log before
/// memory is updated, so a failed write leaves the store unchanged.
#[derive(Debug)]
pub struct AnnotationStore {
    pairs: Vec<PairAssignment>,
    index: HashMap<String, usize>,
    records: Vec<AnnotationRecord>,
    annotators: HashMap<String, BTreeSet<String>>,
    done_by: HashMap<String, BTreeSet<String>>,
    quota: Option<usize>,
    log: Option<PathBuf>,
}

impl AnnotationStore {
    pub fn new(pairs: Vec<PairAssignment>, quota: Option<usize>) -> Self {
        let index = pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();
        Self {
            pairs,
            index,
            records: Vec::new(),
            annotators: HashMap::new(),
            done_by: HashMap::new(),
            quota,
            log: None,
        }
    }

    /// Store persisted to `log`, replaying any records already there.
    pub fn with_log(pairs: Vec<PairAssignment>, quota: Option<usize>, log: impl AsRef<Path>) -> Result<Self, AnnotationError> {
        let mut store = Self::new(pairs, quota);
        let path = log.as_ref().to_path_buf();
        let err = |message: String| AnnotationError::Log {
            path: path.display().to_string(),
            message,
        };
        if path.exists() {
            let f = File::open(&path).map_err(|e| err(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: AnnotationRecord =
                    serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                store.apply(r);
            }
        }
        store.log = Some(path);
        Ok(store)
    }

    fn apply(&mut self, r: AnnotationRecord) {
        self.annotators
            .entry(r.pair_id.clone())
            .or_default()
            .insert(r.annotator_id.clone());
        self.done_by
            .entry(r.annotator_id.clone())
            .or_default()
            .insert(r.pair_id.clone());
        self.records.push(r);
    }

    pub fn pairs(&self) -> &[PairAssignment] {
        &self.pairs
    }

    pub fn pair(&self, id: &str) -> Option<&PairAssignment> {
        self.index.get(id).map(|&i| &self.pairs[i])
    }

    pub fn is_complete(&self, pair_id: &str) -> bool {
        self.annotators.get(pair_id).map_or(0, BTreeSet::len) >= ANNOTATORS_PER_PAIR
    }

    pub fn progress(&self, session: &str) -> Progress {
        let done = self.done_by.get(session).map_or(0, BTreeSet::len);
        let total = self.quota.map_or(self.pairs.len(), |q| q.min(self.pairs.len()));
        Progress { done, total }
    }

    /// First pair, in id order, this session has not annotated and that
    /// still needs an annotator. `None` when the session is finished.
    pub fn next_for(&self, session: &str) -> Option<&PairAssignment> {
        let done = self.done_by.get(session);
        if self.quota.is_some_and(|q| done.map_or(0, BTreeSet::len) >= q) {
            return None;
        }
        self.pairs
            .iter()
            .find(|p| !done.is_some_and(|d| d.contains(&p.pair_id)) && !self.is_complete(&p.pair_id))
    }

    /// Validates and records one complete submission.
    pub fn submit(&mut self, pair_id: &str, submission: &Submission) -> Result<Receipt, AnnotationError> {
        let session = submission.session.trim();
        if session.is_empty() {
            return Err(AnnotationError::EmptySession);
        }
        let pair = self
            .pair(pair_id)
            .ok_or_else(|| AnnotationError::UnknownPair(pair_id.to_string()))?
            .clone();
        let mut by_criterion = BTreeMap::new();
        for c in &submission.choices {
            if by_criterion.insert(c.criterion, c.choice).is_some() {
                return Err(AnnotationError::Incomplete(format!("{:?} answered twice", c.criterion)));
            }
        }
        if let Some(missing) = Criterion::ALL.iter().find(|c| !by_criterion.contains_key(c)) {
            return Err(AnnotationError::Incomplete(format!("{missing:?} missing")));
        }
        let annotators = self.annotators.get(pair_id);
        if annotators.is_some_and(|a| a.contains(session)) {
            return Err(AnnotationError::Duplicate {
                pair_id: pair_id.to_string(),
                annotator: session.to_string(),
            });
        }
        if annotators.map_or(0, BTreeSet::len) >= ANNOTATORS_PER_PAIR {
            return Err(AnnotationError::PairFull(pair_id.to_string()));
        }
        if self
            .quota
            .is_some_and(|q| self.done_by.get(session).map_or(0, BTreeSet::len) >= q)
        {
            return Err(AnnotationError::QuotaExceeded(session.to_string()));
        }
        let new: Vec<AnnotationRecord> = Criterion::ALL
            .iter()
            .map(|c| AnnotationRecord {
                pair_id: pair_id.to_string(),
                annotator_id: session.to_string(),
                criterion: *c,
                choice: pair.canonical(by_criterion[c]),
            })
            .collect();
        if let Some(path) = &self.log {
            let mut buf = String::new();
            for r in &new {
                buf.push_str(&serde_json::to_string(r).expect("record serializes"));
                buf.push('\n');
            }
            let err = |e: std::io::Error| AnnotationError::Log {
                path: path.display().to_string(),
                message: e.to_string(),
            };
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
            f.write_all(buf.as_bytes()).map_err(err)?;
            f.sync_data().map_err(err)?;
        }
        let records = new.len();
        for r in new {
            self.apply(r);
        }
        Ok(Receipt {
            pair_id: pair_id.to_string(),
            records,
            pair_complete: self.is_complete(pair_id),
            progress: self.progress(session),
        })
    }

    /// All records in submission order.
    pub fn export(&self) -> &[AnnotationRecord] {
        &self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_action_reason, AdClass, ContentHash, Provenance};

    fn record(id: &str) -> AdRecord {
        AdRecord {
            id: id.into(),
            image: ImageRef {
                locator: format!("{id}.png"),
                content_hash: ContentHash::of(id.as_bytes()),
                provenance: Provenance::GeneratedFromAr,
            },
            statements: vec![parse_action_reason("I should x because y").unwrap()],
            topic_votes: vec![],
            ad_class: AdClass::Psa,
        }
    }

    fn setup(n: usize) -> Vec<PairAssignment> {
        let mut records = BTreeMap::new();
        let mut specs = Vec::new();
        for i in 0..n {
            records.insert(format!("a{i}"), record(&format!("a{i}")));
            records.insert(format!("b{i}"), record(&format!("b{i}")));
            specs.push(PairSpec {
                pair_id: format!("p{i}"),
                left_record: format!("a{i}"),
                right_record: format!("b{i}"),
            });
        }
        prepare_pairs(&specs, &records, 7).unwrap()
    }

    fn all_left(session: &str) -> Submission {
        Submission {
            session: session.into(),
            choices: Criterion::ALL
                .iter()
                .map(|&criterion| CriterionChoice {
                    criterion,
                    choice: Side::Left,
                })
                .collect(),
        }
    }

    #[test]
    fn shuffle_is_seeded_and_unshuffled_on_export() {
        let a = setup(16);
        assert_eq!(a, setup(16));
        assert!(a.iter().any(|p| p.shuffled) && a.iter().any(|p| !p.shuffled));
        let mut store = AnnotationStore::new(a.clone(), None);
        for p in &a {
            store.submit(&p.pair_id, &all_left("s")).unwrap();
        }
        for r in store.export() {
            let p = a.iter().find(|p| p.pair_id == r.pair_id).unwrap();
            let want = if p.shuffled { Side::Right } else { Side::Left };
            assert_eq!(r.choice, want);
        }
    }

    #[test]
    fn two_annotators_complete_a_pair() {
        let mut store = AnnotationStore::new(setup(1), None);
        assert!(!store.submit("p0", &all_left("s1")).unwrap().pair_complete);
        assert!(store.submit("p0", &all_left("s2")).unwrap().pair_complete);
        assert!(matches!(store.submit("p0", &all_left("s3")), Err(AnnotationError::PairFull(_))));
        assert_eq!(store.export().len(), 20);
    }

    #[test]
    fn duplicate_leaves_store_unchanged() {
        let mut store = AnnotationStore::new(setup(1), None);
        store.submit("p0", &all_left("s1")).unwrap();
        let before = store.export().to_vec();
        assert!(matches!(store.submit("p0", &all_left("s1")), Err(AnnotationError::Duplicate { .. })));
        assert_eq!(store.export(), &before[..]);
    }

    #[test]
    fn incomplete_and_unknown_rejected() {
        let mut store = AnnotationStore::new(setup(1), None);
        let mut s = all_left("s");
        s.choices.pop();
        assert!(matches!(store.submit("p0", &s), Err(AnnotationError::Incomplete(_))));
        let mut s = all_left("s");
        s.choices[9].criterion = Criterion::Alignment;
        assert!(matches!(store.submit("p0", &s), Err(AnnotationError::Incomplete(_))));
        assert!(matches!(store.submit("zz", &all_left("s")), Err(AnnotationError::UnknownPair(_))));
        assert!(matches!(store.submit("p0", &all_left(" ")), Err(AnnotationError::EmptySession)));
    }

    #[test]
    fn next_and_quota() {
        let mut store = AnnotationStore::new(setup(3), Some(2));
        assert_eq!(store.next_for("s").unwrap().pair_id, "p0");
        store.submit("p0", &all_left("s")).unwrap();
        assert_eq!(store.next_for("s").unwrap().pair_id, "p1");
        store.submit("p1", &all_left("s")).unwrap();
        assert!(store.next_for("s").is_none());
        assert!(matches!(store.submit("p2", &all_left("s")), Err(AnnotationError::QuotaExceeded(_))));
        assert_eq!(store.progress("s"), Progress { done: 2, total: 2 });
        store.submit("p0", &all_left("t")).unwrap();
        assert_eq!(store.next_for("u").unwrap().pair_id, "p1");
    }

    #[test]
    fn log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("ann.jsonl");
        let mut store = AnnotationStore::with_log(setup(2), None, &log).unwrap();
        store.submit("p0", &all_left("s1")).unwrap();
        let again = AnnotationStore::with_log(setup(2), None, &log).unwrap();
        assert_eq!(again.export(), store.export());
        assert!(matches!(
            AnnotationStore::with_log(setup(2), None, &log).unwrap().submit("p0", &all_left("s1")),
            Err(AnnotationError::Duplicate { .. })
        ));
    }

    #[test]
    fn view_hides_provenance() {
        let p = &setup(1)[0];
        let json = serde_json::to_string(&PairView::of(p, None)).unwrap();
        assert!(!json.contains("generated"));
        assert!(!json.contains("shuffled"));
        assert!(json.contains("/pairs/p0/images/left"));
    }
}
