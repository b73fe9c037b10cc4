use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::enrich::DescriptionCache;
use crate::error::{Error, Result};

/// Context length of the teacher text encoder, special tokens included.
pub const TOKEN_LIMIT: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Label name only, no generated description.
    Plain,
    Original,
    Succinct,
    Detailed,
    Distinct,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 5] = [
        PromptStyle::Plain,
        PromptStyle::Original,
        PromptStyle::Succinct,
        PromptStyle::Detailed,
        PromptStyle::Distinct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptStyle::Plain => "plain",
            PromptStyle::Original => "original",
            PromptStyle::Succinct => "succinct",
            PromptStyle::Detailed => "detailed",
            PromptStyle::Distinct => "distinct",
        }
    }

    /// LLM instruction template; `{cls}` is replaced by the label.
    pub fn template(self) -> Option<&'static str> {
        match self {
            PromptStyle::Plain => None,
            PromptStyle::Original => Some(
                "Use a single sentence to describe the appearance and shape of {cls}. \
                 Only describe the shape and appearance.",
            ),
            PromptStyle::Succinct => Some(
                "Use a single sentence to broadly describe the appearance and shape of {cls}. \
                 Don't give too much details. Only describe the shape and appearance.",
            ),
            PromptStyle::Detailed => Some(
                "Use a single sentence and short, simple, descriptive phrases to describe \
                 the detailed appearance and detailed shape of {cls}.",
            ),
            PromptStyle::Distinct => Some(
                "Use a single sentence to describe the unique, distinctive appearance and shape \
                 of {cls}. Only describe the unique, distinctive shape and appearance.",
            ),
        }
    }

    pub fn instruction(self, label: &str) -> Option<String> {
        self.template().map(|t| t.replace("{cls}", label))
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptStyle::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown prompt style {s:?}")))
    }
}

/// Splits text into tokens given as byte ranges.
pub trait Tokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    /// Tokens added around every sequence (start / end markers).
    fn special_tokens(&self) -> usize {
        2
    }

    fn count(&self, text: &str) -> usize {
        self.spans(text).len() + self.special_tokens()
    }
}

/// Word-level tokenizer: runs of alphanumerics are one token, every other
/// non-space character is its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut word: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                word.get_or_insert(i);
                continue;
            }
            if let Some(start) = word.take() {
                out.push(start..i);
            }
            if !c.is_whitespace() {
                out.push(i..i + c.len_utf8());
            }
        }
        if let Some(start) = word {
            out.push(start..text.len());
        }
        out
    }
}

pub fn plain_prompt(label: &str) -> String {
    format!("A photo of a {label}")
}

/// Label text for `style`, truncated to [`TOKEN_LIMIT`].
///
/// Plain labels read `A photo of a {label}`. Enriched labels read
/// `a photo of {label}, {description}`; when too long, the description tail
/// is cut at a token boundary and the base prompt is kept whole.
pub fn build_label_text(
    label: &str,
    style: PromptStyle,
    cache: &DescriptionCache,
    generator: Option<&str>,
) -> Result<String> {
    build_label_text_with(label, style, cache, generator, &SimpleTokenizer, TOKEN_LIMIT)
}

pub fn build_label_text_with(
    label: &str,
    style: PromptStyle,
    cache: &DescriptionCache,
    generator: Option<&str>,
    tokenizer: &dyn Tokenizer,
    limit: usize,
) -> Result<String> {
    if style == PromptStyle::Plain {
        return Ok(plain_prompt(label));
    }
    let description = cache
        .lookup(label, style, generator)
        .ok_or_else(|| Error::MissingDescription { label: label.to_string(), style: style.to_string() })?;
    let base = format!("a photo of {label}, ");
    let full = format!("{base}{description}");
    if tokenizer.count(&full) <= limit {
        return Ok(full);
    }
    let base_tokens = tokenizer.count(&base);
    if base_tokens >= limit {
        return Ok(base.trim_end_matches([',', ' ']).to_string());
    }
    let spans = tokenizer.spans(description);
    let keep = limit - base_tokens;
    let end = spans[keep - 1].end;
    Ok(format!("{base}{}", &description[..end]))
}
