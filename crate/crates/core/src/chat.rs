//! OpenAI-style chat-completion wire types shared by the expert client and
//! the HTTP model backend.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::trace::ImageRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

impl ChatMessage {
    pub fn user(parts: Vec<ContentPart>) -> Self {
        Self {
            role: "user".into(),
            content: parts,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::ImageUrl { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl ChatRequest {
    /// Text of the last user message.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(ChatMessage::text)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub message: ResponseMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMessage {
    pub role: String,
    pub content: String,
}

impl ChatResponse {
    pub fn from_text(text: impl Into<String>) -> Self {
        Self {
            choices: vec![Choice {
                message: ResponseMessage {
                    role: "assistant".into(),
                    content: text.into(),
                },
            }],
        }
    }

    pub fn into_text(self) -> Option<String> {
        self.choices.into_iter().next().map(|c| c.message.content)
    }
}

/// Image attachment for an image: URLs pass through, local files are
/// inlined as base64 data URLs.
pub fn image_part(image: &ImageRef) -> std::io::Result<ContentPart> {
    let uri = image.uri.as_str();
    let url = if uri.contains("://") || uri.starts_with("data:") {
        uri.to_string()
    } else {
        let bytes = std::fs::read(uri)?;
        let mime = match Path::new(uri)
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        )
    };
    Ok(ContentPart::ImageUrl {
        image_url: ImageUrl { url },
    })
}

pub fn text_part(text: impl Into<String>) -> ContentPart {
    ContentPart::Text { text: text.into() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_passes_through_and_file_is_inlined() {
        let img = ImageRef::new("a", 1, 1, "http://host/a.jpg");
        assert_eq!(
            image_part(&img).unwrap(),
            ContentPart::ImageUrl {
                image_url: ImageUrl {
                    url: "http://host/a.jpg".into()
                }
            }
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let img = ImageRef::new("b", 1, 1, path.to_str().unwrap());
        match image_part(&img).unwrap() {
            ContentPart::ImageUrl { image_url } => {
                assert_eq!(image_url.url, "data:image/png;base64,AQID")
            }
            other => panic!("{other:?}"),
        }
        assert!(image_part(&ImageRef::new("c", 1, 1, "/nope/missing.jpg")).is_err());
    }

    #[test]
    fn wire_shape() {
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user(vec![text_part("hi")])],
            temperature: 0.0,
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["messages"][0]["content"][0]["type"], "text");
        assert_eq!(req.last_user_text(), "hi");
    }
}
