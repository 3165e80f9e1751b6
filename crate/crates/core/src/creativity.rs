//! Object-based creativity score C_obj.
//!
//! The objects mentioned in the message are extracted by a chat model and
//! each is compared with the image in a joint image-text embedding space.
//! An image that conveys the message well while looking little like the
//! literal objects scores high:
//!
//! ```text
//! c_obj = (1/n) * sum_obj cite / sim(image, obj)
//! ```

use std::collections::HashSet;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cite::CiteResult;
use crate::gateway::GatewayError;
use crate::model::{ActionReason, ImageRef};
use crate::models::Models;
use crate::prompts::{self, PromptError};
use crate::{cosine_similarity, Scalar, Score};

#[derive(Debug, Error)]
pub enum CreativityError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("object extraction returned nothing for {0:?}")]
    Format(String),
    #[error("no object similarities to average")]
    EmptyObjectSet,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectList {
    pub objects: Vec<String>,
    pub source_statement: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CreativityConfig {
    /// Lower clamp for image-object similarity.
    pub denom_floor: Score,
    /// Use the action text as the only object when extraction is empty.
    pub fallback_on_empty: bool,
}

impl Default for CreativityConfig {
    fn default() -> Self {
        Self {
            denom_floor: 0.05,
            fallback_on_empty: true,
        }
    }
}

impl CreativityConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.denom_floor > 0.0 && self.denom_floor < 1.0) {
            return Err(format!("denom_floor {} must be in (0, 1)", self.denom_floor));
        }
        Ok(())
    }
}

/// One object per line, list markers stripped, deduplicated
/// case-insensitively keeping the first spelling.
pub fn parse_object_lines(reply: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    reply
        .lines()
        .map(|l| {
            let l = l.trim().trim_start_matches(['-', '*', '•']).trim_start();
            let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
            let l = if digits > 0 && l[digits..].starts_with(['.', ')']) {
                &l[digits + 1..]
            } else {
                l
            };
            l.trim().trim_end_matches(['.', ',', ';']).trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .filter(|l| seen.insert(l.to_lowercase()))
        .collect()
}

pub async fn extract_objects(models: &Models, ar_m: &ActionReason, cfg: &CreativityConfig) -> Result<ObjectList, CreativityError> {
    let prompt = prompts::OBJECT_EXTRACTION.render(&[("statement", &ar_m.statement)])?;
    let mut objects = Vec::new();
    for attempt in 0..=models.reprompts {
        objects = parse_object_lines(&models.chat(&prompt, attempt).await?);
        if !objects.is_empty() || cfg.fallback_on_empty {
            break;
        }
    }
    if objects.is_empty() {
        if !cfg.fallback_on_empty {
            return Err(CreativityError::Format(ar_m.statement.clone()));
        }
        objects.push(ar_m.action.clone());
    }
    Ok(ObjectList {
        objects,
        source_statement: ar_m.statement.clone(),
    })
}

/// Clamps a raw cosine into `[floor, 1]`.
pub fn clamp_denominator<T: Scalar>(raw: T, floor: T) -> T {
    if raw.is_nan() {
        floor
    } else {
        raw.max(floor).min(T::one())
    }
}

pub async fn object_similarity(models: &Models, image: &ImageRef, object: &str, floor: Score) -> Result<Score, CreativityError> {
    let (vi, vo) = futures::try_join!(models.embed_image(image), models.embed_object(object))?;
    Ok(clamp_denominator(cosine_similarity(&vi, &vo), floor))
}

/// `cite * mean(1 / sims)`.
pub fn c_obj<T: Scalar>(cite: T, sims: &[T]) -> Result<T, CreativityError> {
    if sims.is_empty() {
        return Err(CreativityError::EmptyObjectSet);
    }
    let n = T::from(sims.len()).expect("length fits the scalar type");
    let total = sims.iter().fold(T::zero(), |acc, &s| acc + cite / s);
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreativityResult {
    pub c_obj: Score,
    pub objects: Vec<String>,
    pub sims: Vec<Score>,
}

pub async fn score_creativity(
    models: &Models,
    image: &ImageRef,
    ar_m: &ActionReason,
    cite: &CiteResult,
    cfg: &CreativityConfig,
) -> Result<CreativityResult, CreativityError> {
    if cite.text_only {
        return Ok(CreativityResult {
            c_obj: 0.0,
            objects: Vec::new(),
            sims: Vec::new(),
        });
    }
    let list = extract_objects(models, ar_m, cfg).await?;
    let sims = try_join_all(
        list.objects
            .iter()
            .map(|o| object_similarity(models, image, o, cfg.denom_floor)),
    )
    .await?;
    Ok(CreativityResult {
        c_obj: c_obj(cite.cite, &sims)?,
        objects: list.objects,
        sims,
    })
}
