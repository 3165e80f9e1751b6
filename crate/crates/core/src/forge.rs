//! Dataset construction: LLM-written ad descriptions used as text-to-image
//! prompts, and the preference triples for training the statement generator.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::model::{ActionReason, AdRecord, ImageRef};
use crate::models::Models;
use crate::prompts::{self, PromptError};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("model returned an empty reply for {0}")]
    EmptyOutput(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}:{line}: {message}")]
    Negatives { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdPrompt {
    pub record_id: String,
    pub statement_index: usize,
    pub d_llm: String,
}

/// One preference-training record, serialized as `{prompt, chosen, rejected}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpoTriple {
    pub prompt: String,
    #[serde(rename = "chosen")]
    pub preferred: String,
    #[serde(rename = "rejected")]
    pub dispreferred: String,
}

/// Joins all paragraphs and line breaks into one whitespace-normalised
/// paragraph.
pub fn single_paragraph(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

async fn non_empty_reply<F, Fut>(reprompts: u32, what: &str, mut ask: F) -> Result<String, ForgeError>
where
    F: FnMut(u32) -> Fut,
    Fut: std::future::Future<Output = Result<String, GatewayError>>,
{
    for attempt in 0..=reprompts {
        let text = single_paragraph(&ask(attempt).await?);
        if !text.is_empty() {
            return Ok(text);
        }
    }
    Err(ForgeError::EmptyOutput(what.to_string()))
}

/// Asks the chat model for a one-paragraph visual description of an ad
/// conveying the statement.
pub async fn gen_ad_prompt(models: &Models, record_id: &str, statement_index: usize, ar_m: &ActionReason) -> Result<AdPrompt, ForgeError> {
    let prompt = prompts::AD_DESCRIPTION.render(&[("statement", &ar_m.statement)])?;
    let d_llm = non_empty_reply(models.reprompts, &format!("{record_id}#{statement_index}"), |a| {
        models.chat(&prompt, a)
    })
    .await?;
    Ok(AdPrompt {
        record_id: record_id.to_string(),
        statement_index,
        d_llm,
    })
}

/// Plain one-paragraph image description used as the prompt side of
/// training triples.
pub async fn gen_train_description(models: &Models, image: &ImageRef) -> Result<String, ForgeError> {
    let prompt = prompts::TRAIN_DESCRIPTION.body();
    non_empty_reply(models.reprompts, &image.locator, |a| models.describe(image, prompt, a)).await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeStatement {
    pub record_id: String,
    pub statement: String,
}

/// Reads a JSONL file of `{record_id, statement}` lines into a map keeping
/// file order per record.
pub fn load_negatives(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>, ForgeError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| ForgeError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ForgeError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let neg: NegativeStatement = serde_json::from_str(&line).map_err(|e| ForgeError::Negatives {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.entry(neg.record_id).or_default().push(neg.statement);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpoWarning {
    pub record_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpoBuild {
    pub triples: Vec<CpoTriple>,
    /// Triples emitted per record id.
    pub per_record: BTreeMap<String, usize>,
    pub warnings: Vec<CpoWarning>,
}

/// Cross product of description × preferred statements × negatives per
/// record, records visited in id order. Records lacking a description or
/// negatives are skipped with a warning; collisions where a negative equals
/// a preferred statement are dropped with a warning.
pub fn build_cpo_dataset(
    records: &[AdRecord],
    descriptions: &BTreeMap<String, String>,
    negatives: &BTreeMap<String, Vec<String>>,
) -> CpoBuild {
    let mut sorted: Vec<&AdRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut build = CpoBuild::default();
    let mut warnings = Vec::new();
    for rec in sorted {
        let Some(desc) = descriptions.get(&rec.id).filter(|d| !d.trim().is_empty()) else {
            warnings.push(build_warning(&rec.id, "missing description".into()));
            continue;
        };
        let negs = negatives.get(&rec.id).map(Vec::as_slice).unwrap_or_default();
        if negs.is_empty() {
            warnings.push(build_warning(&rec.id, "missing negatives".into()));
            continue;
        }
        let mut n = 0;
        for w in &rec.statements {
            let preferred = w.statement.trim();
            for l in negs {
                let dispreferred = l.trim();
                if dispreferred.is_empty() {
                    continue;
                }
                if dispreferred == preferred {
                    warnings.push(build_warning(&rec.id, format!("negative equals preferred statement {preferred:?}")));
                    continue;
                }
                build.triples.push(CpoTriple {
                    prompt: desc.clone(),
                    preferred: preferred.to_string(),
                    dispreferred: dispreferred.to_string(),
                });
                n += 1;
            }
        }
        build.per_record.insert(rec.id.clone(), n);
    }
    build.warnings = warnings;
    build
}

fn build_warning(id: &str, message: String) -> CpoWarning {
    CpoWarning {
        record_id: id.to_string(),
        message,
    }
}

/// Generates training descriptions for every record concurrently, keyed by
/// record id.
pub async fn gen_train_descriptions(models: &Models, records: &[AdRecord]) -> Vec<(String, Result<String, ForgeError>)> {
    let futs = records.iter().map(|r| async move { (r.id.clone(), gen_train_description(models, &r.image).await) });
    futures::future::join_all(futs).await
}

/// Hyper-parameters handed to an external preference-optimisation trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub method: String,
    pub base_model: String,
    pub dataset: String,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub max_steps: u32,
}

impl TrainingConfig {
    pub fn stub(dataset: impl Into<String>) -> Self {
        Self {
            method: "cpo".into(),
            base_model: "meta-llama/Meta-Llama-3-8B-Instruct".into(),
            dataset: dataset.into(),
            batch_size: 4,
            learning_rate: 5e-5,
            max_steps: 3000,
        }
    }
}

/// Distinct statements across the given triples, for quick summaries.
pub fn distinct_prompts(triples: &[CpoTriple]) -> usize {
    triples.iter().map(|t| t.prompt.as_str()).collect::<HashSet<_>>().len()
}
