//! HTTP transport for OpenAI-compatible servers.
//!
//! * chat / vision: `POST {endpoint}/chat/completions` with a single user
//!   message; images are sent as an `image_url` content part.
//! * embeddings: `POST {endpoint}/embeddings` with `input` set to the text,
//!   or to a one-element array holding an `image_url` part for images.
//! * image generation: `POST {endpoint}/images/generations` asking for
//!   `b64_json` output.

use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde_json::{json, Value};

use super::{BackendProfile, ImageTransport, Payload, Reply, Transport, TransportError};
use crate::model::ImageRef;

#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

fn url(endpoint: &str, path: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}{path}")
    }
}

fn mime_for(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Jpeg) => "image/jpeg",
        Ok(image::ImageFormat::WebP) => "image/webp",
        Ok(image::ImageFormat::Gif) => "image/gif",
        _ => "image/png",
    }
}

fn image_url(img: &ImageRef, mode: ImageTransport) -> Result<String, TransportError> {
    if mode == ImageTransport::Url && img.is_url() {
        return Ok(img.locator.clone());
    }
    let bytes = img
        .read_bytes()
        .map_err(|e| TransportError::ImageUnreadable(e.to_string()))?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
    Ok(format!("data:{};base64,{b64}", mime_for(&bytes)))
}

/// Builds the JSON body for a request; exposed for wire-format tests.
pub fn request_body(profile: &BackendProfile, payload: &Payload) -> Result<(String, Value), TransportError> {
    match payload {
        Payload::Chat { prompt, image } => {
            let content = match image {
                None => json!(prompt),
                Some(img) => json!([
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": image_url(img, profile.image_transport)?}},
                ]),
            };
            let mut body = json!({
                "model": profile.model_id,
                "messages": [{"role": "user", "content": content}],
            });
            if let Some(t) = profile.decoding.temperature {
                body["temperature"] = json!(t);
            }
            if let Some(n) = profile.decoding.max_tokens {
                body["max_tokens"] = json!(n);
            }
            Ok((url(&profile.endpoint, "/chat/completions"), body))
        }
        Payload::Text(text) => Ok((
            url(&profile.endpoint, "/embeddings"),
            json!({"model": profile.model_id, "input": text}),
        )),
        Payload::Image(img) => Ok((
            url(&profile.endpoint, "/embeddings"),
            json!({
                "model": profile.model_id,
                "input": [{"type": "image_url", "image_url": {"url": image_url(img, profile.image_transport)?}}],
            }),
        )),
    }
}

/// Extracts the reply from a response body.
pub fn parse_reply(payload: &Payload, body: &Value) -> Result<Reply, TransportError> {
    match payload {
        Payload::Chat { .. } => {
            let content = &body["choices"][0]["message"]["content"];
            match content {
                Value::String(s) => Ok(Reply::Text(s.clone())),
                Value::Array(parts) => Ok(Reply::Text(
                    parts
                        .iter()
                        .filter_map(|p| p["text"].as_str())
                        .collect::<Vec<_>>()
                        .join(""),
                )),
                _ => Err(TransportError::Protocol("missing choices[0].message.content".into())),
            }
        }
        Payload::Text(_) | Payload::Image(_) => {
            let arr = body["data"][0]["embedding"]
                .as_array()
                .ok_or_else(|| TransportError::Protocol("missing data[0].embedding".into()))?;
            arr.iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| TransportError::Protocol("non-numeric embedding value".into()))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Reply::Vector)
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> TransportError {
    if e.is_timeout() {
        TransportError::Timeout
    } else {
        TransportError::Network(e.to_string())
    }
}

impl HttpTransport {
    async fn post(&self, url: &str, body: &Value, timeout: Duration, api_key_env: Option<&str>) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(var) = api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.bearer_auth(key);
            }
        }
        let resp = req.send().await.map_err(map_reqwest)?;
        let status = resp.status();
        let text = resp.text().await.map_err(map_reqwest)?;
        if !status.is_success() {
            let body: String = text.chars().take(500).collect();
            return Err(TransportError::Rejected {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Protocol(e.to_string()))
    }

    /// Sends a prompt to an image-generation endpoint and returns the decoded
    /// image bytes.
    pub async fn generate_image(&self, profile: &BackendProfile, prompt: &str) -> Result<Vec<u8>, TransportError> {
        let body = json!({
            "model": profile.model_id,
            "prompt": prompt,
            "n": 1,
            "response_format": "b64_json",
        });
        let url = url(&profile.endpoint, "/images/generations");
        let resp = self
            .post(&url, &body, Duration::from_millis(profile.timeout_ms), profile.api_key_env.as_deref())
            .await?;
        let b64 = resp["data"][0]["b64_json"]
            .as_str()
            .ok_or_else(|| TransportError::Protocol("missing data[0].b64_json".into()))?;
        base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, profile: &BackendProfile, payload: &Payload) -> Result<Reply, TransportError> {
        let (url, body) = request_body(profile, payload)?;
        let resp = self
            .post(&url, &body, Duration::from_millis(profile.timeout_ms), profile.api_key_env.as_deref())
            .await?;
        parse_reply(payload, &resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Role;

    #[test]
    fn chat_body_shape() {
        let mut p = BackendProfile::new(Role::Chat, "http://h/v1/", "llama");
        p.decoding.temperature = Some(0.0);
        let (u, body) = request_body(
            &p,
            &Payload::Chat {
                prompt: "hi".into(),
                image: None,
            },
        )
        .unwrap();
        assert_eq!(u, "http://h/v1/chat/completions");
        assert_eq!(
            body,
            json!({"model": "llama", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0})
        );
    }

    #[test]
    fn endpoint_with_full_path_is_kept() {
        assert_eq!(url("http://h/v1/embeddings", "/embeddings"), "http://h/v1/embeddings");
    }

    #[test]
    fn parses_replies() {
        let chat = Payload::Chat {
            prompt: String::new(),
            image: None,
        };
        let body = json!({"choices": [{"message": {"content": "ok"}}]});
        assert_eq!(parse_reply(&chat, &body).unwrap(), Reply::Text("ok".into()));
        let emb = Payload::Text("x".into());
        let body = json!({"data": [{"embedding": [0.5, 1]}]});
        assert_eq!(parse_reply(&emb, &body).unwrap(), Reply::Vector(vec![0.5, 1.0]));
        assert!(parse_reply(&emb, &json!({})).is_err());
    }
}
