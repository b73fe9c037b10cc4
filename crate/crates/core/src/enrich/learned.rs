use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::enrich::{SimpleTokenizer, Tokenizer};
use crate::error::{Error, Result};
use crate::features::{dot, l2_norm, FeatureKind, FeatureMatrix};

pub const DEFAULT_CONTEXT_TOKENS: usize = 8;

/// A frozen text encoder that accepts token embeddings directly, so a
/// learnable context can be fed in front of the label tokens.
pub trait TokenTextEncoder {
    fn token_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Frozen token embeddings of `text`, flattened (`count * token_dim`).
    fn embed(&self, text: &str) -> Vec<f64>;

    /// Unit-norm text feature for a flattened embedding sequence.
    fn forward(&self, embeddings: &[f64]) -> Vec<f64>;

    /// Gradient with respect to `embeddings` given the gradient of the
    /// output feature.
    fn backward(&self, embeddings: &[f64], grad_feature: &[f64]) -> Vec<f64>;

    /// Snapshot of every encoder parameter.
    fn parameters(&self) -> Vec<f64>;
}

/// Learnable context tokens prepended to the label tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPrompt {
    pub tokens: usize,
    pub token_dim: usize,
    pub context: Vec<f64>,
}

impl LearnedPrompt {
    pub fn zeros(tokens: usize, token_dim: usize) -> Result<Self> {
        if tokens == 0 || token_dim == 0 {
            return Err(Error::ConfigInvalid("prompt needs at least one token of nonzero width".into()));
        }
        Ok(Self { tokens, token_dim, context: vec![0.0; tokens * token_dim] })
    }

    /// Gaussian init with standard deviation `scale`.
    pub fn random(tokens: usize, token_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(tokens, token_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.context.iter_mut().for_each(|x| *x = scale * rng.sample::<f64, _>(StandardNormal));
        Ok(p)
    }

    pub fn step(&mut self, grad: &[f64], lr: f64) {
        for (c, g) in self.context.iter_mut().zip(grad) {
            *c -= lr * g;
        }
    }
}

/// Forward result of a learned prompt, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    pub feature: Vec<f64>,
    embeddings: Vec<f64>,
    context_len: usize,
}

impl PromptEncoding {
    /// Gradient of a scalar loss with respect to the context, given its
    /// gradient with respect to the output feature. Nothing flows into the
    /// encoder or the label-token embeddings.
    pub fn context_grad(&self, encoder: &dyn TokenTextEncoder, grad_feature: &[f64]) -> Vec<f64> {
        let mut g = encoder.backward(&self.embeddings, grad_feature);
        g.truncate(self.context_len);
        g
    }
}

/// Encodes `[context tokens; label tokens]` through a frozen encoder.
pub fn encode_learned_prompt(
    prompt: &LearnedPrompt,
    label: &str,
    encoder: Option<&dyn TokenTextEncoder>,
) -> Result<PromptEncoding> {
    let encoder = encoder.ok_or(Error::EncoderLacksTokenAccess)?;
    if encoder.token_dim() != prompt.token_dim {
        return Err(Error::DimMismatch { expected: encoder.token_dim(), got: prompt.token_dim });
    }
    let mut embeddings = prompt.context.clone();
    embeddings.extend(encoder.embed(label));
    let feature = encoder.forward(&embeddings);
    Ok(PromptEncoding { feature, embeddings, context_len: prompt.context.len() })
}

/// Shared positive and negative contexts for multi-label prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPrompt {
    pub positive: LearnedPrompt,
    pub negative: LearnedPrompt,
}

impl DualPrompt {
    /// Positive and negative text features, one row per label.
    pub fn encode_labels(
        &self,
        labels: &[String],
        encoder: Option<&dyn TokenTextEncoder>,
    ) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let mut pos = Vec::with_capacity(labels.len());
        let mut neg = Vec::with_capacity(labels.len());
        for label in labels {
            pos.push(encode_learned_prompt(&self.positive, label, encoder)?.feature);
            neg.push(encode_learned_prompt(&self.negative, label, encoder)?.feature);
        }
        Ok((
            FeatureMatrix::from_rows(FeatureKind::Text, labels.to_vec(), &pos)?,
            FeatureMatrix::from_rows(FeatureKind::Text, labels.to_vec(), &neg)?,
        ))
    }
}

/// Deterministic stand-in for a teacher text encoder.
///
/// Anchor words (label names) embed to fixed vectors; every other word gets
/// a hash-seeded Gaussian embedding scaled by `filler_scale`. The output is
/// `normalize(M * sum_p w_p e_p)` with position weights `w_p = 1 / (1 + p/10)`
/// and a fixed mixing matrix `M = I + G / (4 sqrt(D))`.
#[derive(Debug, Clone)]
pub struct SyntheticTextEncoder {
    dim: usize,
    seed: u64,
    filler_scale: f64,
    anchors: HashMap<String, Vec<f64>>,
    mix: Vec<f64>,
}

impl SyntheticTextEncoder {
    pub fn new(dim: usize, seed: u64, anchors: HashMap<String, Vec<f64>>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_e9c0_de00_0001);
        let scale = 0.25 / (dim as f64).sqrt();
        let mut mix = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                let g: f64 = rng.sample(StandardNormal);
                mix[r * dim + c] = scale * g + if r == c { 1.0 } else { 0.0 };
            }
        }
        Self { dim, seed, filler_scale: 0.3, anchors, mix }
    }

    fn word_embedding(&self, word: &str) -> Vec<f64> {
        if let Some(a) = self.anchors.get(word) {
            return a.clone();
        }
        let h = u64::from(crc32fast::hash(word.as_bytes()));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ h);
        (0..self.dim).map(|_| self.filler_scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn weight(position: usize) -> f64 {
        1.0 / (1.0 + position as f64 / 10.0)
    }

    fn pooled(&self, embeddings: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim;
        let mut u = vec![0.0; d];
        for (p, e) in embeddings.chunks_exact(d).enumerate() {
            let w = Self::weight(p);
            u.iter_mut().zip(e).for_each(|(a, b)| *a += w * b);
        }
        let h: Vec<f64> = (0..d).map(|r| dot(&self.mix[r * d..(r + 1) * d], &u)).collect();
        let norm = l2_norm(&h);
        (h, norm)
    }
}

impl TokenTextEncoder for SyntheticTextEncoder {
    fn token_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        SimpleTokenizer.spans(text).into_iter().flat_map(|r| self.word_embedding(&text[r])).collect()
    }

    fn forward(&self, embeddings: &[f64]) -> Vec<f64> {
        let (h, norm) = self.pooled(embeddings);
        h.into_iter().map(|x| x / norm.max(f64::MIN_POSITIVE)).collect()
    }

    fn backward(&self, embeddings: &[f64], grad_feature: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let (h, norm) = self.pooled(embeddings);
        let f: Vec<f64> = h.iter().map(|x| x / norm).collect();
        let fg = dot(&f, grad_feature);
        let gh: Vec<f64> = grad_feature.iter().zip(&f).map(|(g, fi)| (g - fi * fg) / norm).collect();
        // g_u = M^T g_h
        let mut gu = vec![0.0; d];
        for (row, g) in self.mix.chunks_exact(d).zip(&gh) {
            gu.iter_mut().zip(row).for_each(|(a, m)| *a += m * g);
        }
        let mut out = Vec::with_capacity(embeddings.len());
        for p in 0..embeddings.len() / d {
            let w = Self::weight(p);
            out.extend(gu.iter().map(|g| w * g));
        }
        out
    }

    fn parameters(&self) -> Vec<f64> {
        let mut p = self.mix.clone();
        let mut keys: Vec<&String> = self.anchors.keys().collect();
        keys.sort();
        for k in keys {
            p.extend(&self.anchors[k]);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> SyntheticTextEncoder {
        let mut anchors = HashMap::new();
        anchors.insert("lotus".to_string(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        SyntheticTextEncoder::new(6, 3, anchors)
    }

    #[test]
    fn zero_context_differs_from_plain_prompt() {
        let enc = encoder();
        let prompt = LearnedPrompt::zeros(4, 6).unwrap();
        let learned = encode_learned_prompt(&prompt, "lotus", Some(&enc)).unwrap().feature;
        let plain = enc.forward(&enc.embed("a photo of a lotus"));
        assert_eq!(enc.embed("a photo of a").len(), 4 * 6);
        let diff: f64 = learned.iter().zip(&plain).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "features should differ, diff = {diff}");
        assert!((l2_norm(&learned) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_token_access() {
        let prompt = LearnedPrompt::zeros(2, 6).unwrap();
        let err = encode_learned_prompt(&prompt, "lotus", None).unwrap_err();
        assert!(matches!(err, Error::EncoderLacksTokenAccess));
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let enc = encoder();
        let prompt = LearnedPrompt::random(3, 6, 0.5, 11).unwrap();
        let target = [0.2, -0.4, 0.1, 0.7, 0.0, -0.3];
        let loss = |p: &LearnedPrompt| {
            let f = encode_learned_prompt(p, "lotus", Some(&enc)).unwrap().feature;
            f.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let enc_out = encode_learned_prompt(&prompt, "lotus", Some(&enc)).unwrap();
        let gf: Vec<f64> = enc_out.feature.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let analytic = enc_out.context_grad(&enc, &gf);
        assert_eq!(analytic.len(), prompt.context.len());
        let eps = 1e-5;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for (i, a) in analytic.iter().enumerate() {
            let mut up = prompt.clone();
            up.context[i] += eps;
            let mut dn = prompt.clone();
            dn.context[i] -= eps;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * eps);
            worst = worst.max((fd - a).abs());
            scale = scale.max(fd.abs());
        }
        assert!(worst / scale < 1e-3, "relative error {}", worst / scale);
    }

    #[test]
    fn optimization_leaves_encoder_untouched() {
        let enc = encoder();
        let before = enc.parameters();
        let mut prompt = LearnedPrompt::random(2, 6, 0.1, 5).unwrap();
        let out = encode_learned_prompt(&prompt, "lotus", Some(&enc)).unwrap();
        let g = out.context_grad(&enc, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        prompt.step(&g, 0.1);
        let after = enc.parameters();
        assert_eq!(before.len(), after.len());
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
