//! Domain types shared across the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::Score;

const CONNECTIVE: &str = "because";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("statement has no \"because\" connective or an empty reason: {0:?}")]
    MissingReason(String),
    #[error("statement has an empty action span: {0:?}")]
    EmptyAction(String),
}

/// One parsed action-reason message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionReason {
    pub statement: String,
    pub action: String,
    pub reason: String,
}

impl ActionReason {
    pub fn parse(statement: &str) -> Result<Self, ParseError> {
        parse_action_reason(statement)
    }

    pub fn reconstruct(&self) -> String {
        reconstruct_statement(self)
    }
}

impl fmt::Display for ActionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.statement)
    }
}

fn is_edge_punct(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | '.' | ';' | ':' | '!' | '?' | '-' | '–' | '—')
}

fn strip_edges(s: &str) -> &str {
    s.trim_matches(is_edge_punct)
}

/// Matches `marker` at the start of `text` (ASCII case-insensitive) on a word
/// boundary and returns the remainder.
fn strip_marker<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let head = text.get(..marker.len())?;
    if !head.eq_ignore_ascii_case(marker) {
        return None;
    }
    let rest = &text[marker.len()..];
    match rest.chars().next() {
        Some(c) if c.is_alphanumeric() || c == '\'' || c == '’' => None,
        _ => Some(rest),
    }
}

/// Splits a statement at the first case-insensitive "because".
///
/// A leading "I should" is dropped from the action. Negated forms
/// ("I shouldn't", "I should not") keep the negation as a leading "not" so
/// that the action still carries the intended polarity.
pub fn parse_action_reason(statement: &str) -> Result<ActionReason, ParseError> {
    let normalized = statement.split_whitespace().collect::<Vec<_>>().join(" ");
    let lower = normalized.to_ascii_lowercase();
    let Some(at) = lower.find(CONNECTIVE) else {
        return Err(ParseError::MissingReason(normalized));
    };
    let head = normalized[..at].trim();
    let tail = &normalized[at + CONNECTIVE.len()..];

    let (negated, rest) = ["i shouldn't", "i shouldn’t", "i should not"]
        .iter()
        .find_map(|m| strip_marker(head, m))
        .map(|r| (true, r))
        .or_else(|| strip_marker(head, "i should").map(|r| (false, r)))
        .unwrap_or((false, head));

    let core = strip_edges(rest);
    if core.is_empty() {
        return Err(ParseError::EmptyAction(normalized));
    }
    let action = if negated {
        format!("not {core}")
    } else {
        core.to_string()
    };

    let reason = strip_edges(tail);
    if reason.is_empty() {
        return Err(ParseError::MissingReason(normalized));
    }

    Ok(ActionReason {
        statement: normalized.clone(),
        action,
        reason: reason.to_string(),
    })
}

pub fn reconstruct_statement(ar: &ActionReason) -> String {
    format!("I should {} because {}", ar.action, ar.reason)
}

/// SHA-256 digest of image bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Where an image came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Original advertisement.
    #[default]
    Real,
    /// Generated with the action-reason statement as the prompt.
    #[serde(alias = "ar")]
    GeneratedFromAr,
    /// Generated from an LLM-written visual description of the message.
    #[serde(alias = "llm")]
    GeneratedFromLlm,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::GeneratedFromAr => "generated-from-ar",
            Provenance::GeneratedFromLlm => "generated-from-llm",
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {locator}: {source}")]
    Io {
        locator: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image {locator} is not a local file")]
    NotLocal { locator: String },
    #[error("content hash mismatch for {locator}")]
    HashMismatch { locator: String },
}

/// Reference to image bytes on disk (or a URL), pinned by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub locator: String,
    pub content_hash: ContentHash,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ImageRef {
    pub fn from_path(path: impl AsRef<Path>, provenance: Provenance) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let locator = path.to_string_lossy().into_owned();
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            locator: locator.clone(),
            source,
        })?;
        Ok(Self {
            locator,
            content_hash: ContentHash::of(&bytes),
            provenance,
        })
    }

    pub fn is_url(&self) -> bool {
        self.locator.starts_with("http://") || self.locator.starts_with("https://")
    }

    pub fn read_bytes(&self) -> Result<Vec<u8>, ImageError> {
        if self.is_url() {
            return Err(ImageError::NotLocal {
                locator: self.locator.clone(),
            });
        }
        std::fs::read(&self.locator).map_err(|source| ImageError::Io {
            locator: self.locator.clone(),
            source,
        })
    }

    /// Reads the bytes and checks them against the stored hash.
    pub fn verify(&self) -> Result<Vec<u8>, ImageError> {
        let bytes = self.read_bytes()?;
        if ContentHash::of(&bytes) != self.content_hash {
            return Err(ImageError::HashMismatch {
                locator: self.locator.clone(),
            });
        }
        Ok(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum AdClass {
    Commercial,
    #[serde(rename = "PSA")]
    Psa,
    #[default]
    Unclassified,
}

impl AdClass {
    pub fn label(self) -> &'static str {
        match self {
            AdClass::Commercial => "Commercial",
            AdClass::Psa => "PSA",
            AdClass::Unclassified => "Unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicVote {
    #[serde(alias = "name")]
    pub topic: String,
    pub votes: u32,
}

/// One advertisement image with its interpretations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdRecord {
    pub id: String,
    pub image: ImageRef,
    pub statements: Vec<ActionReason>,
    pub topic_votes: Vec<TopicVote>,
    pub ad_class: AdClass,
}

/// The seven persuasion components, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Elaboration,
    Synthesis,
    Originality,
    Imagination,
    Audience,
    Benefit,
    Appeal,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Elaboration,
        Component::Synthesis,
        Component::Originality,
        Component::Imagination,
        Component::Audience,
        Component::Benefit,
        Component::Appeal,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            Component::Elaboration => "E",
            Component::Synthesis => "S",
            Component::Originality => "O",
            Component::Imagination => "I",
            Component::Audience => "AU",
            Component::Benefit => "B",
            Component::Appeal => "AP",
        }
    }
}

/// All metric outputs for one (image, statement) pair.
///
/// CITE is always present since creativity and PA depend on it; the other
/// metrics are `None` when they were not selected for the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub record_id: String,
    pub statement_index: usize,
    pub cite: Score,
    pub cite_action: Score,
    pub cite_reason: Score,
    pub c_obj: Option<Score>,
    pub components: Option<BTreeMap<Component, u8>>,
    pub pa: Option<Score>,
    pub pc: Option<Score>,
    pub text_only: bool,
    pub generated_ar: Option<ActionReason>,
}

impl ScoreCard {
    /// Checks the structural invariants of a card scored with the given
    /// reason weight. Returns a description of the first violation.
    pub fn check(&self, alpha: Score) -> Result<(), String> {
        let unit = |name: &str, v: Score| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} = {v} outside [0, 1]"))
            }
        };
        unit("cite", self.cite)?;
        unit("cite_action", self.cite_action)?;
        unit("cite_reason", self.cite_reason)?;
        let combined = (self.cite_action + alpha * self.cite_reason) / (1.0 + alpha);
        if (combined - self.cite).abs() > 1e-9 {
            return Err(format!("cite {} != weighted mean {combined}", self.cite));
        }
        if let Some(pa) = self.pa {
            unit("pa", pa)?;
        }
        if let Some(pc) = self.pc {
            unit("pc", pc)?;
        }
        if let Some(c) = self.c_obj {
            if c < 0.0 {
                return Err(format!("c_obj = {c} negative"));
            }
        }
        if self.text_only {
            if self.cite != 0.0 || self.cite_action != 0.0 || self.cite_reason != 0.0 {
                return Err("text-only card with non-zero CITE".into());
            }
            if self.c_obj.is_some_and(|c| c != 0.0) {
                return Err("text-only card with non-zero c_obj".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gatorade_statement() {
        let ar = parse_action_reason("I should drink Gatorade because it would help me win").unwrap();
        assert_eq!(ar.action, "drink Gatorade");
        assert_eq!(ar.reason, "it would help me win");
    }

    #[test]
    fn missing_connective() {
        assert!(matches!(
            parse_action_reason("I should recycle"),
            Err(ParseError::MissingReason(_))
        ));
        assert!(matches!(
            parse_action_reason("I should recycle because ."),
            Err(ParseError::MissingReason(_))
        ));
    }

    #[test]
    fn first_occurrence_split() {
        let ar = parse_action_reason("I should act because A because B").unwrap();
        assert_eq!(ar.action, "act");
        assert_eq!(ar.reason, "A because B");
    }

    #[test]
    fn empty_action() {
        assert!(matches!(
            parse_action_reason("I should because it is good"),
            Err(ParseError::EmptyAction(_))
        ));
        assert!(matches!(
            parse_action_reason("Because reasons"),
            Err(ParseError::EmptyAction(_))
        ));
    }

    #[test]
    fn prefix_optional_and_case_insensitive() {
        let ar = parse_action_reason("  Buy this car, BECAUSE it is safe.").unwrap();
        assert_eq!(ar.action, "Buy this car");
        assert_eq!(ar.reason, "it is safe");
    }

    #[test]
    fn punctuation_inside_is_kept() {
        let ar = parse_action_reason("I should vote, because the U.S. needs me!").unwrap();
        assert_eq!(ar.action, "vote");
        assert_eq!(ar.reason, "the U.S. needs me");
    }

    #[test]
    fn negation_is_kept() {
        let ar = parse_action_reason("I shouldn't smoke because it kills").unwrap();
        assert_eq!(ar.action, "not smoke");
        let again = parse_action_reason(&ar.reconstruct()).unwrap();
        assert_eq!(again.action, "not smoke");
        // "note" is not the "not" marker
        let ar = parse_action_reason("I should note this because it matters").unwrap();
        assert_eq!(ar.action, "note this");
    }

    #[test]
    fn reconstruct_templates() {
        let ar = ActionReason {
            statement: String::new(),
            action: "x".into(),
            reason: "y".into(),
        };
        assert_eq!(reconstruct_statement(&ar), "I should x because y");
        let ar = ActionReason {
            statement: String::new(),
            action: "buy this car".into(),
            reason: "it is safe".into(),
        };
        assert_eq!(reconstruct_statement(&ar), "I should buy this car because it is safe");
        let g = parse_action_reason("I should drink Gatorade because it would help me win").unwrap();
        let back = parse_action_reason(&g.reconstruct()).unwrap();
        assert_eq!((back.action, back.reason), (g.action, g.reason));
    }

    #[test]
    fn content_hash_hex_round_trip() {
        let h = ContentHash::of(b"abc");
        assert_eq!(
            h.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(ContentHash::from_hex(&h.to_hex()).unwrap(), h);
    }

    #[test]
    fn image_ref_verifies_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        std::fs::write(&p, b"abc").unwrap();
        let r = ImageRef::from_path(&p, Provenance::Real).unwrap();
        assert!(r.verify().is_ok());
        std::fs::write(&p, b"abd").unwrap();
        assert!(matches!(r.verify(), Err(ImageError::HashMismatch { .. })));
    }

    fn card(a: f64, r: f64, text_only: bool) -> ScoreCard {
        ScoreCard {
            record_id: "r".into(),
            statement_index: 0,
            cite: (a + 4.0 * r) / 5.0,
            cite_action: a,
            cite_reason: r,
            c_obj: Some(0.0),
            components: None,
            pa: Some(0.5),
            pc: Some(0.5),
            text_only,
            generated_ar: None,
        }
    }

    #[test]
    fn score_card_invariants() {
        assert!(card(0.2, 0.7, false).check(4.0).is_ok());
        assert!(card(0.0, 0.0, true).check(4.0).is_ok());
        assert!(card(0.2, 0.7, true).check(4.0).is_err());
        let mut c = card(0.2, 0.7, false);
        c.cite += 1e-6;
        assert!(c.check(4.0).is_err());
    }

    proptest! {
        #[test]
        fn parse_reconstruct_idempotent(
            action in "[a-zA-Z][a-zA-Z ]{0,20}[a-zA-Z]",
            reason in "[a-zA-Z][a-zA-Z ,]{0,30}[a-zA-Z]",
            prefix in prop::bool::ANY,
        ) {
            prop_assume!(!action.to_ascii_lowercase().contains("because"));
            let stmt = if prefix {
                format!("I should {action} because {reason}")
            } else {
                format!("{action} because {reason}")
            };
            if let Ok(first) = parse_action_reason(&stmt) {
                let second = parse_action_reason(&first.reconstruct()).unwrap();
                prop_assert_eq!(&first.action, &second.action);
                prop_assert_eq!(&first.reason, &second.reason);
                let third = parse_action_reason(&second.reconstruct()).unwrap();
                prop_assert_eq!(second, third);
            }
        }
    }
}
