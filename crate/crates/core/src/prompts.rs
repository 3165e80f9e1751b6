//! Prompt templates shipped as resource files.
//!
//! Interpolation points are written `{name}`; every other brace sequence in a
//! template (for instance `${answer}` format hints) is literal text. Templates
//! whose first line is `#! origin: artifact-defined` were written for this
//! pipeline rather than transcribed; header lines starting with `#!` are
//! never sent to a model.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Component;

const ARTIFACT_HEADER: &str = "#! origin: artifact-defined";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template {template} needs a value for {{{name}}}")]
    MissingVariable { template: &'static str, name: &'static str },
    #[error("template {template} has no placeholder {{{name}}}")]
    UnknownVariable { template: &'static str, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Transcribed,
    ArtifactDefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    raw: &'static str,
    pub placeholders: &'static [&'static str],
}

impl PromptTemplate {
    /// Resource file contents, byte for byte.
    pub fn raw(&self) -> &'static str {
        self.raw
    }

    pub fn origin(&self) -> Origin {
        if self.raw.starts_with(ARTIFACT_HEADER) {
            Origin::ArtifactDefined
        } else {
            Origin::Transcribed
        }
    }

    /// Template text without `#!` header lines.
    pub fn body(&self) -> &'static str {
        let mut rest = self.raw;
        while rest.starts_with("#!") {
            rest = rest.split_once('\n').map_or("", |(_, tail)| tail);
        }
        rest
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.raw.as_bytes()))
    }

    /// Fills every placeholder in a single left-to-right pass, so values that
    /// happen to contain `{name}` are never expanded again.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        for (k, _) in vars {
            if !self.placeholders.contains(k) {
                return Err(PromptError::UnknownVariable {
                    template: self.name,
                    name: k.to_string(),
                });
            }
        }
        for p in self.placeholders {
            if !vars.iter().any(|(k, _)| k == p) {
                return Err(PromptError::MissingVariable {
                    template: self.name,
                    name: p,
                });
            }
        }
        let body = self.body();
        let mut out = String::with_capacity(body.len() + 256);
        let mut rest = body;
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            for (k, v) in vars {
                let token_len = k.len() + 2;
                if tail.len() >= token_len
                    && tail.as_bytes()[token_len - 1] == b'}'
                    && &tail[1..token_len - 1] == *k
                {
                    out.push_str(v);
                    rest = &tail[token_len..];
                    continue 'scan;
                }
            }
            out.push('{');
            rest = &tail[1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

macro_rules! template {
    ($ident:ident, $name:literal, [$($ph:literal),*]) => {
        pub const $ident: PromptTemplate = PromptTemplate {
            name: $name,
            raw: include_str!(concat!("../resources/prompts/", $name, ".txt")),
            placeholders: &[$($ph),*],
        };
    };
}

template!(TRAIN_DESCRIPTION, "train_description", []);
template!(INFERENCE_DESCRIPTION, "inference_description", []);
template!(ACTION_REASON_ZERO_SHOT, "action_reason_zero_shot", ["description"]);
template!(ACTION_REASON_FINE_TUNED, "action_reason_fine_tuned", ["description"]);
template!(CREATIVITY_DIRECT, "creativity_direct", ["description"]);
template!(PERSUASIVENESS_DIRECT, "persuasiveness_direct", ["description"]);
template!(ELABORATION, "elaboration", ["description"]);
template!(SYNTHESIS, "synthesis", ["description"]);
template!(ORIGINALITY, "originality", ["description"]);
template!(IMAGINATION, "imagination", ["description"]);
template!(AUDIENCE, "audience", ["description", "audience"]);
template!(BENEFIT, "benefit", ["description"]);
template!(APPEAL, "appeal", ["description", "appeal-category"]);
template!(AD_DESCRIPTION, "ad_description", ["statement"]);
template!(OBJECT_EXTRACTION, "object_extraction", ["statement"]);
template!(AUDIENCE_DETECTION, "audience_detection", ["statement"]);
template!(APPEAL_DETECTION, "appeal_detection", ["statement"]);
template!(IGNORE_STATEMENT_TEXT, "ignore_statement_text", []);

/// Every shipped template.
pub const ALL: [PromptTemplate; 18] = [
    TRAIN_DESCRIPTION,
    INFERENCE_DESCRIPTION,
    ACTION_REASON_ZERO_SHOT,
    ACTION_REASON_FINE_TUNED,
    CREATIVITY_DIRECT,
    PERSUASIVENESS_DIRECT,
    ELABORATION,
    SYNTHESIS,
    ORIGINALITY,
    IMAGINATION,
    AUDIENCE,
    BENEFIT,
    APPEAL,
    AD_DESCRIPTION,
    OBJECT_EXTRACTION,
    AUDIENCE_DETECTION,
    APPEAL_DETECTION,
    IGNORE_STATEMENT_TEXT,
];

pub fn by_name(name: &str) -> Option<&'static PromptTemplate> {
    ALL.iter().find(|t| t.name == name)
}

pub fn for_component(c: Component) -> &'static PromptTemplate {
    match c {
        Component::Elaboration => &ELABORATION,
        Component::Synthesis => &SYNTHESIS,
        Component::Originality => &ORIGINALITY,
        Component::Imagination => &IMAGINATION,
        Component::Audience => &AUDIENCE,
        Component::Benefit => &BENEFIT,
        Component::Appeal => &APPEAL,
    }
}

/// `(name, sha256)` for every template, for run manifests.
pub fn digests() -> Vec<(&'static str, String)> {
    ALL.iter().map(|t| (t.name, t.digest())).collect()
}
