use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::gateway::mock::{MockScript, MockTransport};
use crate::gateway::{BackendProfile, EmbedInput, Gateway, GatewayError, RetryPolicy, Role};
use crate::model::ImageRef;
use crate::Embedding;

/// One profile per model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backends {
    pub chat: BackendProfile,
    pub vision: BackendProfile,
    /// Sentence embedding used for action/reason similarity.
    pub text_embed: BackendProfile,
    pub image_embed: BackendProfile,
    /// Text side of the joint image-text space used for object similarity.
    /// Falls back to `text_embed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_text_embed: Option<BackendProfile>,
}

impl Backends {
    /// All four roles served by one endpoint, handy for mocks.
    pub fn single(endpoint: &str) -> Self {
        Self {
            chat: BackendProfile::new(Role::Chat, endpoint, "chat"),
            vision: BackendProfile::new(Role::Vision, endpoint, "vision"),
            text_embed: BackendProfile::new(Role::TextEmbed, endpoint, "text-embed"),
            image_embed: BackendProfile::new(Role::ImageEmbed, endpoint, "image-embed"),
            object_text_embed: None,
        }
    }

    pub fn object_text(&self) -> &BackendProfile {
        self.object_text_embed.as_ref().unwrap_or(&self.text_embed)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let check = |p: &BackendProfile, role: Role| -> Result<(), GatewayError> {
            p.validate()?;
            if p.role != role {
                return Err(GatewayError::RoleMismatch {
                    expected: role,
                    actual: p.role,
                });
            }
            Ok(())
        };
        check(&self.chat, Role::Chat)?;
        check(&self.vision, Role::Vision)?;
        check(&self.text_embed, Role::TextEmbed)?;
        check(&self.image_embed, Role::ImageEmbed)?;
        check(self.object_text(), Role::TextEmbed)
    }

    pub fn all(&self) -> Vec<&BackendProfile> {
        let mut v = vec![&self.chat, &self.vision, &self.text_embed, &self.image_embed];
        if let Some(p) = &self.object_text_embed {
            v.push(p);
        }
        v
    }
}

/// Gateway plus the profiles each metric talks to.
#[derive(Clone)]
pub struct Models {
    pub gateway: Arc<Gateway>,
    pub backends: Backends,
    /// Extra attempts when a model reply cannot be parsed.
    pub reprompts: u32,
}

impl Models {
    pub fn new(gateway: Arc<Gateway>, backends: Backends) -> Self {
        Self {
            gateway,
            backends,
            reprompts: 1,
        }
    }

    /// Models backed by a single scripted mock, with an in-memory cache and
    /// no transport retries.
    pub fn with_mock(script: MockScript) -> (Self, Arc<MockTransport>) {
        let mock = Arc::new(MockTransport::new(script));
        let gateway = Gateway::builder(mock.clone()).retry(RetryPolicy::none()).build();
        (Self::new(Arc::new(gateway), Backends::single("mock:inline")), mock)
    }

    pub async fn chat(&self, prompt: &str, attempt: u32) -> Result<String, GatewayError> {
        self.gateway.chat_attempt(&self.backends.chat, prompt, attempt).await
    }

    pub async fn describe(&self, image: &ImageRef, prompt: &str, attempt: u32) -> Result<String, GatewayError> {
        self.gateway
            .describe_attempt(&self.backends.vision, image, prompt, attempt)
            .await
    }

    pub async fn embed_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        self.gateway.embed(&self.backends.text_embed, EmbedInput::Text(text)).await
    }

    pub async fn embed_object(&self, text: &str) -> Result<Embedding, GatewayError> {
        self.gateway.embed(self.backends.object_text(), EmbedInput::Text(text)).await
    }

    pub async fn embed_image(&self, image: &ImageRef) -> Result<Embedding, GatewayError> {
        self.gateway.embed(&self.backends.image_embed, EmbedInput::Image(image)).await
    }
}
