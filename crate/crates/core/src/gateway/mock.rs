//! Scripted backend for tests and offline fixtures.
//!
//! A [`MockScript`] is a list of rules matched against chat and vision
//! requests (first match wins) plus embedding tables. Scripts are plain JSON
//! so fixtures can be checked in next to a dataset and referenced from a
//! profile as `endpoint = "mock:path/to/script.json"`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendProfile, Payload, Reply, Role, Transport, TransportError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    /// Restrict the rule to one role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_equals: Option<String>,
    /// Every listed substring must occur in the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_contains: Vec<String>,
    /// Hex content hash the attached image must have.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    /// The first `fail_times` matches fail with a network error.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_times: u32,
    /// Answer with this HTTP status instead of a response text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    /// The n-th successful match gets `responses[n]`; the last one repeats.
    #[serde(default)]
    pub responses: Vec<String>,
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

impl MockRule {
    fn matches(&self, role: Role, prompt: &str, image: Option<&str>) -> bool {
        if self.role.is_some_and(|r| r != role) {
            return false;
        }
        if self.prompt_equals.as_deref().is_some_and(|p| p != prompt) {
            return false;
        }
        if !self.prompt_contains.iter().all(|s| prompt.contains(s.as_str())) {
            return false;
        }
        match (&self.image, image) {
            (Some(want), Some(got)) => want.eq_ignore_ascii_case(got),
            (Some(_), None) => false,
            (None, _) => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Exact text to vector.
    #[serde(default)]
    pub text_embeddings: BTreeMap<String, Vec<f64>>,
    /// Image content hash (hex) to vector.
    #[serde(default)]
    pub image_embeddings: BTreeMap<String, Vec<f64>>,
    /// Texts without an exact entry embed as token counts over this
    /// vocabulary (one dimension per entry, lower-cased word match).
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

impl MockScript {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn reply_exact(self, prompt: &str, response: &str) -> Self {
        self.rule(MockRule {
            prompt_equals: Some(prompt.into()),
            responses: vec![response.into()],
            ..MockRule::default()
        })
    }

    pub fn reply_containing(self, needle: &str, response: &str) -> Self {
        self.rule(MockRule {
            prompt_contains: vec![needle.into()],
            responses: vec![response.into()],
            ..MockRule::default()
        })
    }

    /// Sequence of replies for successive matching calls.
    pub fn reply_sequence(self, needle: &str, responses: &[&str]) -> Self {
        self.rule(MockRule {
            prompt_contains: vec![needle.into()],
            responses: responses.iter().map(|s| s.to_string()).collect(),
            ..MockRule::default()
        })
    }

    pub fn reply_image(self, image_hash: &str, needle: &str, response: &str) -> Self {
        self.rule(MockRule {
            prompt_contains: vec![needle.into()],
            image: Some(image_hash.into()),
            responses: vec![response.into()],
            ..MockRule::default()
        })
    }

    pub fn text_vector(mut self, text: &str, v: Vec<f64>) -> Self {
        self.text_embeddings.insert(text.into(), v);
        self
    }

    pub fn image_vector(mut self, image_hash: &str, v: Vec<f64>) -> Self {
        self.image_embeddings.insert(image_hash.to_ascii_lowercase(), v);
        self
    }

    pub fn vocabulary<I: IntoIterator<Item = S>, S: Into<String>>(mut self, words: I) -> Self {
        self.vocabulary = words.into_iter().map(Into::into).collect();
        self
    }

    fn bag_of_words(&self, text: &str) -> Option<Vec<f64>> {
        if self.vocabulary.is_empty() {
            return None;
        }
        let mut v = vec![0.0; self.vocabulary.len()];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
        {
            if let Some(i) = self.vocabulary.iter().position(|w| w.to_lowercase() == token) {
                v[i] += 1.0;
            }
        }
        Some(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub role: Role,
    pub prompt: Option<String>,
    pub image: Option<String>,
}

#[derive(Debug, Default)]
pub struct MockTransport {
    script: MockScript,
    matches: Mutex<Vec<u32>>,
    calls: Mutex<Vec<MockCall>>,
    count: AtomicU64,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        Self {
            script,
            matches: Mutex::new(vec![0; n]),
            calls: Mutex::default(),
            count: AtomicU64::new(0),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        MockScript::from_file(path).map(Self::new)
    }

    /// Number of requests that reached this transport.
    pub fn call_count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().expect("mock poisoned").clone()
    }

    fn unscripted(what: &str) -> TransportError {
        TransportError::Rejected {
            status: 404,
            body: format!("mock has no scripted response for {what}"),
        }
    }

    fn answer(&self, role: Role, prompt: &str, image: Option<&str>) -> Result<Reply, TransportError> {
        let Some(idx) = self.script.rules.iter().position(|r| r.matches(role, prompt, image)) else {
            let head: String = prompt.chars().take(80).collect();
            return Err(Self::unscripted(&format!("{role:?} prompt {head:?}")));
        };
        let rule = &self.script.rules[idx];
        let n = {
            let mut m = self.matches.lock().expect("mock poisoned");
            let n = m[idx];
            m[idx] += 1;
            n
        };
        if n < rule.fail_times {
            return Err(TransportError::Network(format!("scripted failure {} of {}", n + 1, rule.fail_times)));
        }
        if let Some(status) = rule.status {
            return Err(TransportError::Rejected {
                status,
                body: "scripted status".into(),
            });
        }
        let k = (n - rule.fail_times) as usize;
        let text = rule
            .responses
            .get(k)
            .or_else(|| rule.responses.last())
            .cloned()
            .unwrap_or_default();
        Ok(Reply::Text(text))
    }
}

#[async_trait]
impl Transport for MockTransport {
    async fn send(&self, profile: &BackendProfile, payload: &Payload) -> Result<Reply, TransportError> {
        self.count.fetch_add(1, Ordering::SeqCst);
        let image_hex = payload.image().map(|i| i.content_hash.to_hex());
        self.calls.lock().expect("mock poisoned").push(MockCall {
            role: profile.role,
            prompt: match payload {
                Payload::Chat { prompt, .. } | Payload::Text(prompt) => Some(prompt.clone()),
                Payload::Image(_) => None,
            },
            image: image_hex.clone(),
        });

        match payload {
            Payload::Chat { prompt, .. } => self.answer(profile.role, prompt, image_hex.as_deref()),
            Payload::Text(text) => self
                .script
                .text_embeddings
                .get(text)
                .cloned()
                .or_else(|| self.script.bag_of_words(text))
                .map(Reply::Vector)
                .ok_or_else(|| Self::unscripted(&format!("text embedding of {text:?}"))),
            Payload::Image(img) => {
                let hex = img.content_hash.to_hex();
                self.script
                    .image_embeddings
                    .get(&hex)
                    .cloned()
                    .map(Reply::Vector)
                    .ok_or_else(|| Self::unscripted(&format!("image embedding of {}", img.locator)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn sequences_and_repeats() {
        let m = MockTransport::new(MockScript::default().reply_sequence("q", &["a", "b"]));
        let p = BackendProfile::new(Role::Chat, "mock:x", "m");
        let ask = |s: &str| Payload::Chat {
            prompt: s.into(),
            image: None,
        };
        assert_eq!(m.send(&p, &ask("q1")).await.unwrap(), Reply::Text("a".into()));
        assert_eq!(m.send(&p, &ask("q2")).await.unwrap(), Reply::Text("b".into()));
        assert_eq!(m.send(&p, &ask("q3")).await.unwrap(), Reply::Text("b".into()));
        assert!(m.send(&p, &ask("zzz")).await.is_err());
        assert_eq!(m.call_count(), 4);
    }

    #[test]
    fn script_json_round_trip() {
        let s = MockScript::default()
            .reply_exact("ping", "pong")
            .text_vector("x", vec![1.0, 0.0])
            .vocabulary(["a"]);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MockScript>(&json).unwrap(), s);
    }
}
