//! Label text construction, LLM description enrichment, per-image captions
//! and learnable prompt contexts.

mod cache;
mod client;
mod learned;
mod prompt;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cache::{DescriptionCache, DescriptionRecord};
pub use client::{FixtureClient, FixtureRecord, TextGenerator};
pub use learned::{
    encode_learned_prompt, DualPrompt, LearnedPrompt, PromptEncoding, SyntheticTextEncoder, TokenTextEncoder,
    DEFAULT_CONTEXT_TOKENS,
};
pub use prompt::{
    build_label_text, build_label_text_with, plain_prompt, PromptStyle, SimpleTokenizer, Tokenizer, TOKEN_LIMIT,
};

use crate::error::{Error, Result};

/// Fills `cache` with one description per label for `style`, calling the
/// client only for labels not cached under its id. Returns the descriptions
/// in label order.
pub fn generate_descriptions(
    labels: &[String],
    style: PromptStyle,
    client: &dyn TextGenerator,
    cache: &mut DescriptionCache,
) -> Result<Vec<String>> {
    if style == PromptStyle::Plain {
        return Err(Error::ConfigInvalid("plain style has no generated description".into()));
    }
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        if let Some(hit) = cache.get(label, style, client.id()) {
            out.push(hit.description.clone());
            continue;
        }
        let instruction = style.instruction(label).expect("enriched style has a template");
        let text = client.generate(&instruction)?.trim().to_string();
        if text.is_empty() {
            return Err(Error::EmptyGeneration(label.clone()));
        }
        cache.insert(DescriptionRecord {
            label: label.clone(),
            style,
            generator: client.id().to_string(),
            description: text.clone(),
            timestamp: client.timestamp(),
        })?;
        out.push(text);
    }
    Ok(out)
}

/// At most one caption per sample id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    captions: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    sample: String,
    caption: String,
}

impl CaptionSet {
    pub fn get(&self, sample: &str) -> Option<&str> {
        self.captions.get(sample).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.captions.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut set = Self::default();
        if !path.exists() {
            return Ok(set);
        }
        for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
            let c: CaptionLine = serde_json::from_str(line)?;
            if set.captions.insert(c.sample.clone(), c.caption).is_some() {
                return Err(Error::DuplicateId(c.sample));
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (sample, caption) in &self.captions {
            out.push_str(&serde_json::to_string(&CaptionLine { sample: sample.clone(), caption: caption.clone() })?);
            out.push('\n');
        }
        crate::persist::write_atomic(path.as_ref(), out.as_bytes())
    }
}

/// Captions every `(sample id, image reference)` not already in `set`.
/// Returns the number of client calls made.
pub fn generate_captions(
    samples: &[(String, String)],
    captioner: &dyn TextGenerator,
    set: &mut CaptionSet,
) -> Result<usize> {
    let mut calls = 0;
    for (id, image) in samples {
        if set.captions.contains_key(id) {
            continue;
        }
        let caption = captioner.generate(image)?.trim().to_string();
        calls += 1;
        if caption.is_empty() {
            return Err(Error::EmptyGeneration(id.clone()));
        }
        set.captions.insert(id.clone(), caption);
    }
    Ok(calls)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EGYPTIAN: &str = "The Egyptian Cat, or Egyptian Mau, is a medium-sized feline with a lithe and muscular body, a short, spotted coat in colors such as silver or bronze, and large, almond-shaped green eyes.";

    fn fixture() -> FixtureClient {
        FixtureClient::new(
            "fixture:test",
            [
                FixtureRecord {
                    request: PromptStyle::Original.instruction("Egyptian cat").unwrap(),
                    response: EGYPTIAN.into(),
                },
                FixtureRecord { request: PromptStyle::Original.instruction("void").unwrap(), response: "  ".into() },
                FixtureRecord { request: "img/car.jpg".into(), response: "a white car is parked in a field".into() },
                FixtureRecord { request: "img/a.jpg".into(), response: "a".into() },
                FixtureRecord { request: "img/b.jpg".into(), response: "b".into() },
            ],
        )
    }

    #[test]
    fn fixture_description_and_cache_hit() {
        let client = fixture();
        let mut cache = DescriptionCache::default();
        let labels = vec!["Egyptian cat".to_string()];
        let out = generate_descriptions(&labels, PromptStyle::Original, &client, &mut cache).unwrap();
        assert_eq!(out, [EGYPTIAN]);
        assert_eq!(client.calls(), 1);
        let again = generate_descriptions(&labels, PromptStyle::Original, &client, &mut cache).unwrap();
        assert_eq!(again, out);
        assert_eq!(client.calls(), 1);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn empty_generation_not_cached() {
        let client = fixture();
        let mut cache = DescriptionCache::default();
        let err = generate_descriptions(&["void".into()], PromptStyle::Original, &client, &mut cache).unwrap_err();
        assert!(matches!(err, Error::EmptyGeneration(l) if l == "void"));
        assert!(cache.is_empty());
    }

    #[test]
    fn unreachable_request() {
        let client = fixture();
        let mut cache = DescriptionCache::default();
        let err = generate_descriptions(&["dog".into()], PromptStyle::Detailed, &client, &mut cache).unwrap_err();
        assert!(matches!(err, Error::ClientUnavailable(_)));
    }

    #[test]
    fn captions_idempotent() {
        let client = fixture();
        let mut set = CaptionSet::default();
        let samples = vec![("car1".to_string(), "img/car.jpg".to_string())];
        assert_eq!(generate_captions(&samples, &client, &mut set).unwrap(), 1);
        assert_eq!(set.get("car1"), Some("a white car is parked in a field"));
        let before = set.clone();
        assert_eq!(generate_captions(&samples, &client, &mut set).unwrap(), 0);
        assert_eq!(set, before);
    }

    #[test]
    fn caption_call_count() {
        let client = fixture();
        let mut set = CaptionSet::default();
        let samples: Vec<(String, String)> = [("1", "img/a.jpg"), ("2", "img/b.jpg"), ("3", "img/car.jpg")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(generate_captions(&samples, &client, &mut set).unwrap(), 3);
        assert_eq!(client.calls(), 3);
    }
}
