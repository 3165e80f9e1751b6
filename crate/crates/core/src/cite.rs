//! Contextual image-text alignment (CITE).
//!
//! The image is described by a vision model, a chat model reads the
//! description and writes the action-reason statement it thinks the image
//! conveys, and the two components of that statement are compared with the
//! intended message:
//!
//! ```text
//! cite = (sim(action_gen, action) + alpha * sim(reason_gen, reason)) / (1 + alpha)
//! ```
//!
//! Images whose description says they hold no objects beyond text and logos
//! score zero without generating a statement.

use futures::try_join;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::model::{parse_action_reason, ActionReason, ImageRef, ParseError};
use crate::models::Models;
use crate::prompts::{self, PromptError};
use crate::{cosine_similarity, Scalar, Score};

/// Objects listed from the description are capped at this many.
pub const MAX_LISTED_OBJECTS: usize = 5;
pub const DEFAULT_ALPHA: Score = 4.0;

#[derive(Debug, Error)]
pub enum CiteError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("vision reply has neither a Q1 nor a Q2 answer: {0:?}")]
    Format(String),
    #[error("generated statement unusable: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ArMode {
    ZeroShot,
    #[default]
    FineTuned,
}

/// How per-statement scores of one image are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl Aggregation {
    pub fn pool(self, values: &[Score]) -> Option<Score> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            Aggregation::Mean => values.iter().sum::<Score>() / values.len() as Score,
            Aggregation::Max => values.iter().copied().fold(Score::NEG_INFINITY, Score::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiteConfig {
    /// Weight of the reason component.
    pub alpha: Score,
    pub ar_mode: ArMode,
    /// Similarities below this value count as zero. With the default of 0
    /// this clamps negative cosines.
    pub similarity_floor: Score,
    pub aggregation: Aggregation,
    /// Append the instruction to ignore rendered "I should…" text to the
    /// description prompt.
    pub ignore_statement_text: bool,
}

impl Default for CiteConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            ar_mode: ArMode::FineTuned,
            similarity_floor: 0.0,
            aggregation: Aggregation::Mean,
            ignore_statement_text: true,
        }
    }
}

impl CiteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0) {
            return Err(format!("alpha {} must be >= 0", self.alpha));
        }
        if !(0.0..1.0).contains(&self.similarity_floor) {
            return Err(format!("similarity_floor {} must be in [0, 1)", self.similarity_floor));
        }
        Ok(())
    }
}

/// Parsed answer to the two-question description prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescription {
    pub objects_present: bool,
    pub object_list: Vec<String>,
    pub body: String,
}

fn find_marker(lower: &str, marker: &str) -> Option<usize> {
    lower.find(marker)
}

fn strip_list_prefix(s: &str) -> &str {
    let s = s.trim();
    let s = s.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 && s[digits..].starts_with(['.', ')']) {
        s[digits + 1..].trim_start()
    } else {
        s
    }
}

fn parse_object_answer(answer: &str) -> (bool, Vec<String>) {
    let first_word = answer
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .map(str::to_ascii_lowercase);
    match first_word.as_deref() {
        Some("no" | "none") => return (false, Vec::new()),
        None => return (false, Vec::new()),
        _ => {}
    }
    let mut text = answer.trim();
    if let Some(rest) = strip_yes(text) {
        text = rest;
    }
    let objects = text
        .split([',', ';', '\n'])
        .flat_map(|s| s.split(" and "))
        .map(strip_list_prefix)
        .map(|s| s.trim_matches(|c: char| c.is_whitespace() || c == '.'))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .take(MAX_LISTED_OBJECTS)
        .collect();
    (true, objects)
}

fn strip_yes(text: &str) -> Option<&str> {
    let head = text.get(..3)?;
    if head.eq_ignore_ascii_case("yes") && !text[3..].starts_with(|c: char| c.is_alphanumeric()) {
        Some(text[3..].trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ',' | '.' | ':' | '-')))
    } else {
        None
    }
}

/// Parses a `Q1: … / Q2: …` reply. Returns `None` when neither marker is
/// present. A missing Q2 leaves the Q1 answer as the body.
pub fn parse_description(reply: &str) -> Option<ImageDescription> {
    let lower = reply.to_ascii_lowercase();
    let q1 = find_marker(&lower, "q1:");
    let q2 = find_marker(&lower, "q2:");
    if q1.is_none() && q2.is_none() {
        return None;
    }
    let q1_answer = q1.map(|i| {
        let end = q2.filter(|&j| j > i).unwrap_or(reply.len());
        reply[i + 3..end].trim()
    });
    let q2_answer = q2.map(|j| {
        let end = q1.filter(|&i| i > j).unwrap_or(reply.len());
        reply[j + 3..end].trim()
    });
    let (objects_present, object_list) = match q1_answer {
        Some(a) => parse_object_answer(a),
        None => (true, Vec::new()),
    };
    let body = q2_answer.or(q1_answer).unwrap_or_default().to_string();
    Some(ImageDescription {
        objects_present,
        object_list,
        body,
    })
}

pub fn description_prompt(cfg: &CiteConfig) -> String {
    let mut p = prompts::INFERENCE_DESCRIPTION.body().to_string();
    if cfg.ignore_statement_text {
        if !p.ends_with('\n') {
            p.push('\n');
        }
        p.push_str(prompts::IGNORE_STATEMENT_TEXT.body());
    }
    p
}

pub async fn describe_for_cite(models: &Models, image: &ImageRef, cfg: &CiteConfig) -> Result<ImageDescription, CiteError> {
    let prompt = description_prompt(cfg);
    let mut last = String::new();
    for attempt in 0..=models.reprompts {
        let reply = models.describe(image, &prompt, attempt).await?;
        if let Some(d) = parse_description(&reply) {
            return Ok(d);
        }
        last = reply;
    }
    Err(CiteError::Format(last))
}

/// Picks the first sentence that contains "I should"; falls back to the
/// first non-empty line.
pub fn extract_statement(reply: &str) -> String {
    let lower = reply.to_ascii_lowercase();
    if let Some(start) = lower.find("i should") {
        let tail = &reply[start..];
        let mut end = tail.len();
        let mut iter = tail.char_indices().peekable();
        while let Some((i, c)) = iter.next() {
            if c == '\n' {
                end = i;
                break;
            }
            if matches!(c, '.' | '!' | '?') {
                let next_is_break = iter.peek().is_none_or(|(_, n)| n.is_whitespace());
                if next_is_break {
                    end = i + c.len_utf8();
                    break;
                }
            }
        }
        return tail[..end].trim().to_string();
    }
    reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or_default()
        .to_string()
}

pub fn ar_prompt(description: &str, mode: ArMode) -> Result<String, PromptError> {
    let t = match mode {
        ArMode::ZeroShot => &prompts::ACTION_REASON_ZERO_SHOT,
        ArMode::FineTuned => &prompts::ACTION_REASON_FINE_TUNED,
    };
    t.render(&[("description", description)])
}

/// Asks the chat model for the action-reason statement a description
/// conveys, reprompting when the reply does not parse.
pub async fn generate_ar(models: &Models, description: &str, mode: ArMode) -> Result<ActionReason, CiteError> {
    let prompt = ar_prompt(description, mode)?;
    let mut last = None;
    for attempt in 0..=models.reprompts {
        let reply = models.chat(&prompt, attempt).await?;
        match parse_action_reason(&extract_statement(&reply)) {
            Ok(ar) => return Ok(ar),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// Clamps a raw cosine into `[0, 1]`, zeroing values under `floor`.
pub fn clamp_similarity<T: Scalar>(raw: T, floor: T) -> T {
    if raw.is_nan() || raw < floor || raw < T::zero() {
        T::zero()
    } else {
        raw.min(T::one())
    }
}

pub async fn sem_sim(models: &Models, a: &str, b: &str, floor: Score) -> Result<Score, CiteError> {
    if a == b {
        return Ok(1.0);
    }
    let (ea, eb) = try_join!(models.embed_text(a), models.embed_text(b))?;
    Ok(clamp_similarity(cosine_similarity(&ea, &eb), floor))
}

/// Reason-weighted mean of the two component similarities.
pub fn combine_cite<T: Scalar>(sim_action: T, sim_reason: T, alpha: T) -> T {
    (sim_action + alpha * sim_reason) / (T::one() + alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiteResult {
    pub cite: Score,
    pub cite_action: Score,
    pub cite_reason: Score,
    pub generated_ar: Option<ActionReason>,
    pub text_only: bool,
    pub description: ImageDescription,
}

pub async fn score_cite(models: &Models, image: &ImageRef, ar_m: &ActionReason, cfg: &CiteConfig) -> Result<CiteResult, CiteError> {
    let description = describe_for_cite(models, image, cfg).await?;
    cite_from_description(models, description, ar_m, cfg).await
}

/// Scores against an already obtained description.
pub async fn cite_from_description(
    models: &Models,
    description: ImageDescription,
    ar_m: &ActionReason,
    cfg: &CiteConfig,
) -> Result<CiteResult, CiteError> {
    if !description.objects_present {
        return Ok(CiteResult {
            cite: 0.0,
            cite_action: 0.0,
            cite_reason: 0.0,
            generated_ar: None,
            text_only: true,
            description,
        });
    }
    let generated = generate_ar(models, &description.body, cfg.ar_mode).await?;
    let (sa, sr) = try_join!(
        sem_sim(models, &generated.action, &ar_m.action, cfg.similarity_floor),
        sem_sim(models, &generated.reason, &ar_m.reason, cfg.similarity_floor),
    )?;
    Ok(CiteResult {
        cite: combine_cite(sa, sr, cfg.alpha),
        cite_action: sa,
        cite_reason: sr,
        generated_ar: Some(generated),
        text_only: false,
        description,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockScript;
    use crate::model::Provenance;
    use proptest::prelude::*;

    #[test]
    fn combine_examples() {
        assert_eq!(combine_cite(0.5, 0.5, 4.0), 0.5);
        assert!((combine_cite(1.0, 0.0, 4.0) - 0.2f64).abs() < 1e-15);
        assert!((combine_cite(0.2, 0.7, 4.0) - 0.6f64).abs() < 1e-15);
        assert!((combine_cite(0.2f32, 0.7, 4.0) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn description_text_only() {
        let d = parse_description("Q1: No\nQ2: A poster with text.").unwrap();
        assert!(!d.objects_present);
        assert!(d.object_list.is_empty());
        assert_eq!(d.body, "A poster with text.");
        assert!(!parse_description("Q1: None.\nQ2: x").unwrap().objects_present);
    }

    #[test]
    fn description_object_list() {
        let d = parse_description("Q1: bottle, runner\nQ2: A runner holds a bottle.").unwrap();
        assert!(d.objects_present);
        assert_eq!(d.object_list, vec!["bottle", "runner"]);
        assert_eq!(d.body, "A runner holds a bottle.");
        let d = parse_description("Q1: Yes, a car and a road; 3. tree, sky, sun, cloud\nQ2: scene").unwrap();
        assert_eq!(d.object_list, vec!["a car", "a road", "tree", "sky", "sun"]);
        // "Notebook" starts with "no" but is an object
        assert!(parse_description("Q1: Notebook\nQ2: x").unwrap().objects_present);
    }

    #[test]
    fn description_without_markers() {
        assert_eq!(parse_description("A nice picture of a dog."), None);
        let d = parse_description("Q2: just a body").unwrap();
        assert!(d.objects_present);
        assert_eq!(d.body, "just a body");
    }

    #[test]
    fn statement_extraction() {
        assert_eq!(
            extract_statement("Sure! I should X because Y. Hope this helps."),
            "I should X because Y."
        );
        assert_eq!(extract_statement("I should a because b\nmore"), "I should a because b");
        assert_eq!(extract_statement("\n  buy it because cheap \n"), "buy it because cheap");
    }

    #[test]
    fn zero_shot_prompt_interpolates() {
        let p = ar_prompt("a red car", ArMode::ZeroShot).unwrap();
        assert!(p.contains("Description: a red car.\n"));
        assert!(p.contains("I should ${action} because ${reason}"));
        let p = ar_prompt("a red car", ArMode::FineTuned).unwrap();
        assert_eq!(
            p,
            "What is the correct interpretation for the described image:\nDescription: a red car.\n"
        );
    }

    fn png(dir: &std::path::Path, shade: u8) -> ImageRef {
        let p = dir.join(format!("img{shade}.png"));
        image::RgbImage::from_pixel(2, 2, image::Rgb([shade, 1, 2])).save(&p).unwrap();
        ImageRef::from_path(&p, Provenance::Real).unwrap()
    }

    fn gatorade() -> ActionReason {
        parse_action_reason("I should drink Gatorade because it would help me win").unwrap()
    }

    #[tokio::test]
    async fn describe_format_error_after_reprompt() {
        let dir = tempfile::tempdir().unwrap();
        let img = png(dir.path(), 1);
        let script = MockScript::default().reply_sequence("Q1:", &["just prose", "still prose"]);
        let (models, mock) = Models::with_mock(script);
        let err = describe_for_cite(&models, &img, &CiteConfig::default()).await.unwrap_err();
        assert!(matches!(err, CiteError::Format(_)));
        assert_eq!(mock.call_count(), 2);
    }

    #[tokio::test]
    async fn description_prompt_carries_ignore_instruction() {
        let p = description_prompt(&CiteConfig::default());
        assert!(p.starts_with(prompts::INFERENCE_DESCRIPTION.raw()));
        assert!(p.contains("\"I should\""));
        let plain = description_prompt(&CiteConfig {
            ignore_statement_text: false,
            ..CiteConfig::default()
        });
        assert_eq!(plain, prompts::INFERENCE_DESCRIPTION.raw());
    }

    #[tokio::test]
    async fn generate_ar_strips_filler() {
        let script = MockScript::default().reply_containing(
            "Description: desc.",
            "Sure! I should drink Gatorade because it would help me win.",
        );
        let (models, _) = Models::with_mock(script);
        let ar = generate_ar(&models, "desc", ArMode::FineTuned).await.unwrap();
        assert_eq!(ar.action, "drink Gatorade");
        assert_eq!(ar.reason, "it would help me win");
    }

    #[tokio::test]
    async fn generate_ar_gives_up_after_one_reprompt() {
        let script = MockScript::default().reply_sequence("Description:", &["no connective", "still none"]);
        let (models, mock) = Models::with_mock(script);
        let err = generate_ar(&models, "desc", ArMode::ZeroShot).await.unwrap_err();
        assert!(matches!(err, CiteError::Parse(ParseError::MissingReason(_))));
        assert_eq!(mock.call_count(), 2);
    }

    #[tokio::test]
    async fn generate_ar_recovers_on_reprompt() {
        let script = MockScript::default().reply_sequence("Description:", &["junk", "I should a because b"]);
        let (models, _) = Models::with_mock(script);
        let ar = generate_ar(&models, "desc", ArMode::ZeroShot).await.unwrap();
        assert_eq!(ar.reason, "b");
    }

    #[tokio::test]
    async fn sem_sim_examples() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let script = MockScript::default()
            .text_vector("e1", vec![1.0, 0.0, 0.0])
            .text_vector("e2", vec![0.0, 1.0, 0.0])
            .text_vector("diag", vec![s, s, 0.0])
            .text_vector("neg", vec![-1.0, 0.0, 0.0]);
        let (models, mock) = Models::with_mock(script);
        assert_eq!(sem_sim(&models, "same", "same", 0.0).await.unwrap(), 1.0);
        assert_eq!(mock.call_count(), 0);
        assert_eq!(sem_sim(&models, "e1", "e2", 0.0).await.unwrap(), 0.0);
        let v = sem_sim(&models, "diag", "e1", 0.0).await.unwrap();
        // (1,1,0)/sqrt2 . (1,0,0) over unit norms
        assert!((v - 0.7071067811865476).abs() < 1e-12);
        assert_eq!(sem_sim(&models, "neg", "e1", 0.0).await.unwrap(), 0.0);
        assert_eq!(sem_sim(&models, "diag", "e1", 0.8).await.unwrap(), 0.0);
    }

    #[tokio::test]
    async fn text_only_image_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let img = png(dir.path(), 2);
        let script = MockScript::default().reply_image(&img.content_hash.to_hex(), "Q1:", "Q1: No\nQ2: A poster with text.");
        let (models, mock) = Models::with_mock(script);
        let r = score_cite(&models, &img, &gatorade(), &CiteConfig::default()).await.unwrap();
        assert!(r.text_only);
        assert_eq!((r.cite, r.cite_action, r.cite_reason), (0.0, 0.0, 0.0));
        assert!(r.generated_ar.is_none());
        assert_eq!(mock.call_count(), 1);
    }

    #[tokio::test]
    async fn identity_chain_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = png(dir.path(), 3);
        let script = MockScript::default()
            .reply_image(&img.content_hash.to_hex(), "Q1:", "Q1: bottle, runner\nQ2: A runner drinks Gatorade.")
            .reply_containing(
                "Description: A runner drinks Gatorade.",
                "I should drink Gatorade because it would help me win",
            );
        let (models, _) = Models::with_mock(script);
        let r = score_cite(&models, &img, &gatorade(), &CiteConfig::default()).await.unwrap();
        assert!(!r.text_only);
        assert_eq!(r.cite, 1.0);
        assert_eq!(r.description.object_list, vec!["bottle", "runner"]);
    }

    #[tokio::test]
    async fn composed_chain_matches_hand_value() {
        // action sim 0.2 and reason sim 0.7 via unit vectors at those cosines
        let dir = tempfile::tempdir().unwrap();
        let img = png(dir.path(), 4);
        let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let script = MockScript::default()
            .reply_image(&img.content_hash.to_hex(), "Q1:", "Q1: car\nQ2: A car.")
            .reply_containing("Description: A car.", "I should drive fast because roads are open")
            .text_vector("drive fast", unit(0.2))
            .text_vector("drink Gatorade", vec![1.0, 0.0])
            .text_vector("roads are open", unit(0.7))
            .text_vector("it would help me win", vec![1.0, 0.0]);
        let (models, _) = Models::with_mock(script);
        let r = score_cite(&models, &img, &gatorade(), &CiteConfig::default()).await.unwrap();
        assert!((r.cite_action - 0.2).abs() < 1e-12);
        assert!((r.cite_reason - 0.7).abs() < 1e-12);
        assert!((r.cite - 0.6).abs() < 1e-12);
    }

    #[test]
    fn aggregation_pools() {
        assert_eq!(Aggregation::Mean.pool(&[0.2, 0.4]), Some(0.30000000000000004));
        assert_eq!(Aggregation::Max.pool(&[0.2, 0.4]), Some(0.4));
        assert_eq!(Aggregation::Mean.pool(&[]), None);
    }

    proptest! {
        #[test]
        fn combine_is_bounded_and_monotone(a in 0.0f64..=1.0, r in 0.0f64..=1.0, d in 0.0f64..0.5, alpha in 0.0f64..10.0) {
            let c = combine_cite(a, r, alpha);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
            prop_assert!(combine_cite((a + d).min(1.0), r, alpha) >= c - 1e-15);
            prop_assert!(combine_cite(a, (r + d).min(1.0), alpha) >= c - 1e-15);
        }

        #[test]
        fn combine_rank_invariant_under_common_scaling(
            a1 in 0.0f64..=1.0, r1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0, r2 in 0.0f64..=1.0, k in 0.01f64..1.0,
        ) {
            let before = combine_cite(a1, r1, 4.0).partial_cmp(&combine_cite(a2, r2, 4.0));
            let after = combine_cite(k * a1, k * r1, 4.0).partial_cmp(&combine_cite(k * a2, k * r2, 4.0));
            let gap = (combine_cite(a1, r1, 4.0) - combine_cite(a2, r2, 4.0)).abs();
            prop_assume!(gap > 1e-12);
            prop_assert_eq!(before, after);
        }
    }
}
