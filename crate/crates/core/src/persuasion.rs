//! Persuasiveness-alignment score PA and its component-only variant PC.
//!
//! Seven persuasion components are each scored 0–5 by a chat model from the
//! image description. PA adds the reason-alignment CITE term on the same
//! 0–5 scale and normalises:
//!
//! ```text
//! pa = (sum(components) + 5 * cite_reason) / 40
//! pc = sum(components) / 35
//! ```

use std::collections::BTreeMap;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cite::CiteResult;
use crate::gateway::GatewayError;
use crate::model::{ActionReason, Component};
use crate::models::Models;
use crate::prompts::{self, PromptError};
use crate::{Scalar, Score};

#[derive(Debug, Error)]
pub enum PersuasionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("audience detection returned nothing for {0:?}")]
    Format(String),
    #[error("no appeal label in reply {0:?}")]
    UnparseableAppeal(String),
    #[error("no numeric Answer for {component:?} in reply {reply:?}")]
    ScoreParse { component: Component, reply: String },
    #[error("component {0:?} missing")]
    MissingComponent(Component),
    #[error("component {0:?} given more than once")]
    DuplicateComponent(Component),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Appeal {
    Ethos,
    Pathos,
    Logos,
}

impl Appeal {
    pub const ALL: [Appeal; 3] = [Appeal::Ethos, Appeal::Pathos, Appeal::Logos];

    pub fn label(self) -> &'static str {
        match self {
            Appeal::Ethos => "Ethos",
            Appeal::Pathos => "Pathos",
            Appeal::Logos => "Logos",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersuasionContext {
    pub audience: String,
    pub appeal: Appeal,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: Component,
    pub value: u8,
    pub explanation: String,
}

fn first_line(reply: &str) -> Option<String> {
    reply
        .lines()
        .map(|l| l.trim().trim_matches('"').trim())
        .find(|l| !l.is_empty())
        .map(str::to_string)
}

pub async fn detect_audience(models: &Models, ar_m: &ActionReason) -> Result<String, PersuasionError> {
    let prompt = prompts::AUDIENCE_DETECTION.render(&[("statement", &ar_m.statement)])?;
    for attempt in 0..=models.reprompts {
        if let Some(line) = first_line(&models.chat(&prompt, attempt).await?) {
            return Ok(line);
        }
    }
    Err(PersuasionError::Format(ar_m.statement.clone()))
}

/// First of the three labels appearing as a whole word, case-insensitively.
pub fn parse_appeal(reply: &str) -> Option<Appeal> {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|w| Appeal::ALL.into_iter().find(|a| a.label().eq_ignore_ascii_case(w)))
}

pub async fn detect_appeal(models: &Models, ar_m: &ActionReason) -> Result<Appeal, PersuasionError> {
    let prompt = prompts::APPEAL_DETECTION.render(&[("statement", &ar_m.statement)])?;
    let mut last = String::new();
    for attempt in 0..=models.reprompts {
        last = models.chat(&prompt, attempt).await?;
        if let Some(a) = parse_appeal(&last) {
            return Ok(a);
        }
    }
    Err(PersuasionError::UnparseableAppeal(last))
}

fn leading_number(s: &str) -> Option<f64> {
    let s = s.trim_start().trim_start_matches(['*', '"', '\'']).trim_start();
    let end = s
        .char_indices()
        .take_while(|&(i, c)| c.is_ascii_digit() || (c == '.' && i > 0) || (c == '-' && i == 0))
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    s[..end].trim_end_matches('.').parse().ok()
}

/// Value after the last `Answer:` that carries a number, rounded and clamped
/// to 0–5, plus the text after the preceding `Explanation:`.
pub fn parse_component_reply(reply: &str) -> Option<(u8, String)> {
    let lower = reply.to_ascii_lowercase();
    let (pos, value) = lower
        .rmatch_indices("answer:")
        .find_map(|(i, m)| leading_number(&reply[i + m.len()..]).map(|v| (i, v)))?;
    let value = value.round().clamp(0.0, 5.0) as u8;
    let explanation = lower[..pos]
        .rfind("explanation:")
        .map(|e| reply[e + "explanation:".len()..pos].trim().to_string())
        .unwrap_or_default();
    Some((value, explanation))
}

pub fn component_prompt(component: Component, ctx: &PersuasionContext) -> Result<String, PromptError> {
    let t = prompts::for_component(component);
    match component {
        Component::Audience => t.render(&[("description", &ctx.description), ("audience", &ctx.audience)]),
        Component::Appeal => t.render(&[("description", &ctx.description), ("appeal-category", ctx.appeal.label())]),
        _ => t.render(&[("description", &ctx.description)]),
    }
}

pub async fn score_component(models: &Models, component: Component, ctx: &PersuasionContext) -> Result<ComponentScore, PersuasionError> {
    let prompt = component_prompt(component, ctx)?;
    let mut last = String::new();
    for attempt in 0..=models.reprompts {
        last = models.chat(&prompt, attempt).await?;
        if let Some((value, explanation)) = parse_component_reply(&last) {
            return Ok(ComponentScore {
                component,
                value,
                explanation,
            });
        }
    }
    Err(PersuasionError::ScoreParse { component, reply: last })
}

/// Checks that each of the seven components appears exactly once and
/// returns their values in canonical order.
pub fn component_values(components: &[ComponentScore]) -> Result<BTreeMap<Component, u8>, PersuasionError> {
    let mut map = BTreeMap::new();
    for c in components {
        if map.insert(c.component, c.value.min(5)).is_some() {
            return Err(PersuasionError::DuplicateComponent(c.component));
        }
    }
    if let Some(&missing) = Component::ALL.iter().find(|c| !map.contains_key(c)) {
        return Err(PersuasionError::MissingComponent(missing));
    }
    Ok(map)
}

fn component_sum<T: Scalar>(components: &[ComponentScore]) -> Result<T, PersuasionError> {
    let total: u32 = component_values(components)?.values().map(|&v| u32::from(v)).sum();
    Ok(T::lit(f64::from(total)))
}

pub fn pa_score<T: Scalar>(components: &[ComponentScore], cite_reason: T) -> Result<T, PersuasionError> {
    let sum: T = component_sum(components)?;
    Ok((sum + T::lit(5.0) * cite_reason) / T::lit(40.0))
}

pub fn pc_score<T: Scalar>(components: &[ComponentScore]) -> Result<T, PersuasionError> {
    let sum: T = component_sum(components)?;
    Ok(sum / T::lit(35.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersuasionResult {
    pub pa: Score,
    pub pc: Score,
    pub components: Vec<ComponentScore>,
    pub context: PersuasionContext,
}

impl PersuasionResult {
    pub fn values(&self) -> BTreeMap<Component, u8> {
        self.components.iter().map(|c| (c.component, c.value)).collect()
    }
}

/// Detects audience and appeal, scores the seven components concurrently
/// from the CITE description, and combines them. Text-only images keep their
/// component scores and contribute a zero alignment term.
pub async fn score_persuasiveness(models: &Models, ar_m: &ActionReason, cite: &CiteResult) -> Result<PersuasionResult, PersuasionError> {
    let (audience, appeal) = futures::try_join!(detect_audience(models, ar_m), detect_appeal(models, ar_m))?;
    let context = PersuasionContext {
        audience,
        appeal,
        description: cite.description.body.clone(),
    };
    let components = try_join_all(Component::ALL.iter().map(|&c| score_component(models, c, &context))).await?;
    let cite_reason = if cite.text_only { 0.0 } else { cite.cite_reason };
    Ok(PersuasionResult {
        pa: pa_score(&components, cite_reason)?,
        pc: pc_score(&components)?,
        components,
        context,
    })
}
