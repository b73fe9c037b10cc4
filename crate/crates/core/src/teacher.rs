//! Sources of frozen teacher features.
//!
//! [`SyntheticTeacher`] is a seeded stand-in whose text features are its
//! class centers, so vision-language alignment is perfect by construction.
//! [`CachedTeacher`] serves features exported from a real model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::enrich::{
    build_label_text, DescriptionCache, DescriptionRecord, PromptStyle, SyntheticTextEncoder, TokenTextEncoder,
};
use crate::error::{Error, Result};
use crate::features::{l2_norm, FeatureKind, FeatureMatrix};
use crate::persist::{cache_read, cache_write, CacheMeta};

pub trait TeacherProvider {
    fn embed_dim(&self) -> usize;

    fn generator_id(&self) -> String;

    /// Unit-norm image feature of a sample.
    fn image_feature(&self, sample: &str) -> Result<Vec<f64>>;

    /// Unit-norm feature of a text.
    fn text_feature(&self, text: &str) -> Result<Vec<f64>>;

    /// Token-level access for learned prompts; `None` for string-only encoders.
    fn token_encoder(&self) -> Option<&dyn TokenTextEncoder> {
        None
    }

    fn image_features(&self, samples: &[String]) -> Result<FeatureMatrix> {
        let rows = samples.iter().map(|s| self.image_feature(s)).collect::<Result<Vec<_>>>()?;
        FeatureMatrix::from_rows(FeatureKind::TeacherVisual, samples.to_vec(), &rows)
    }

    /// Text features with row ids `ids` (texts themselves may repeat).
    fn text_features(&self, ids: &[String], texts: &[String]) -> Result<FeatureMatrix> {
        if ids.len() != texts.len() {
            return Err(Error::ShapeMismatch("one id per text required".into()));
        }
        let rows = texts.iter().map(|t| self.text_feature(t)).collect::<Result<Vec<_>>>()?;
        FeatureMatrix::from_rows(FeatureKind::Text, ids.to_vec(), &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTeacherSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Pull of every class center toward one shared direction. 0 gives
    /// isotropic centers; larger values shrink the spread between classes.
    pub anchor_weight: f64,
    /// Per-dimension standard deviation of image-feature noise around the
    /// class center, before normalization.
    pub noise: f64,
    /// Per-dimension scale of the seeded offset that enriched prompt styles
    /// add to a class center.
    pub style_offset: f64,
}

impl Default for SyntheticTeacherSpec {
    fn default() -> Self {
        Self { seed: 0, num_classes: 32, embed_dim: 20, anchor_weight: 0.0, noise: 0.3, style_offset: 0.3 }
    }
}

impl SyntheticTeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::BadSpec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.embed_dim < 2 {
            return Err(Error::BadSpec(format!("need at least 2 dimensions, got {}", self.embed_dim)));
        }
        for (name, v) in
            [("noise", self.noise), ("anchor_weight", self.anchor_weight), ("style_offset", self.style_offset)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::BadSpec(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn label_name(class: usize) -> String {
        format!("cls{class:02}")
    }
}

pub const SYNTHETIC_GENERATOR: &str = "synthetic";

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn derived_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.rotate_left(32));
    rng.set_stream(stream);
    rng
}

/// Seeded synthetic teacher. Samples are registered explicitly and their
/// features depend only on (seed, class, index), never on creation order.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    spec: SyntheticTeacherSpec,
    centers: Vec<Vec<f64>>,
    texts: HashMap<String, Vec<f64>>,
    images: HashMap<String, Vec<f64>>,
    /// Pre-normalization latent per sample (center + noise).
    latents: HashMap<String, Vec<f64>>,
    descriptions: DescriptionCache,
    encoder: SyntheticTextEncoder,
}

pub fn synthetic_teacher(spec: &SyntheticTeacherSpec) -> Result<SyntheticTeacher> {
    SyntheticTeacher::new(spec.clone())
}

impl SyntheticTeacher {
    pub fn new(spec: SyntheticTeacherSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let mut rng = derived_rng(spec.seed, 1, 0, 0);
        let anchor = unit(gaussian(&mut rng, d, 1.0));
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
        for _ in 0..spec.num_classes {
            let mut g = gaussian(&mut rng, d, 1.0 / (d as f64).sqrt());
            g.iter_mut().zip(&anchor).for_each(|(x, a)| *x += spec.anchor_weight * a);
            centers.push(unit(g));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(Error::BadSpec("identical class centers".into()));
                }
            }
        }

        let mut descriptions = DescriptionCache::default();
        let mut texts = HashMap::new();
        let mut anchors = HashMap::new();
        for (c, center) in centers.iter().enumerate() {
            let label = SyntheticTeacherSpec::label_name(c);
            anchors.insert(label.clone(), center.clone());
            for style in PromptStyle::ALL {
                if style != PromptStyle::Plain {
                    descriptions.insert(DescriptionRecord {
                        label: label.clone(),
                        style,
                        generator: SYNTHETIC_GENERATOR.into(),
                        description: format!("a {style} synthetic description of {label}"),
                        timestamp: 0,
                    })?;
                }
                let text = build_label_text(&label, style, &descriptions, Some(SYNTHETIC_GENERATOR))?;
                let feature = if style == PromptStyle::Plain {
                    center.clone()
                } else {
                    let mut r = derived_rng(spec.seed, 2, c as u64, style as u64);
                    let mut v = gaussian(&mut r, d, spec.style_offset);
                    v.iter_mut().zip(center).for_each(|(x, m)| *x += m);
                    unit(v)
                };
                texts.insert(text, feature);
            }
        }
        let encoder = SyntheticTextEncoder::new(d, spec.seed, anchors);
        Ok(Self { spec, centers, texts, images: HashMap::new(), latents: HashMap::new(), descriptions, encoder })
    }

    pub fn spec(&self) -> &SyntheticTeacherSpec {
        &self.spec
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.spec.num_classes).map(SyntheticTeacherSpec::label_name).collect()
    }

    /// Synthetic descriptions for every label and enriched style.
    pub fn descriptions(&self) -> &DescriptionCache {
        &self.descriptions
    }

    /// Registers sample `id` as the `index`-th draw of `class`; returns its
    /// pre-normalization latent.
    pub fn add_sample(&mut self, id: &str, class: usize, index: u64) -> Result<Vec<f64>> {
        if class >= self.spec.num_classes {
            return Err(Error::BadSpec(format!("class {class} out of range")));
        }
        if self.images.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let mut rng = derived_rng(self.spec.seed, 3, class as u64, index);
        let mut latent = gaussian(&mut rng, self.spec.embed_dim, self.spec.noise);
        latent.iter_mut().zip(&self.centers[class]).for_each(|(x, c)| *x += c);
        if l2_norm(&latent) < 1e-9 {
            latent = self.centers[class].clone();
        }
        self.images.insert(id.to_string(), unit(latent.clone()));
        self.latents.insert(id.to_string(), latent.clone());
        Ok(latent)
    }

    /// Registers a text whose feature is `normalize(center + scale * g)`.
    pub fn add_text_near_class(&mut self, text: &str, class: usize, scale: f64, index: u64) -> Result<()> {
        let mut rng = derived_rng(self.spec.seed, 4, class as u64, index);
        let mut v = gaussian(&mut rng, self.spec.embed_dim, scale);
        v.iter_mut().zip(&self.centers[class]).for_each(|(x, c)| *x += c);
        self.texts.entry(text.to_string()).or_insert_with(|| unit(v));
        Ok(())
    }

    pub fn sample_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.images.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn known_texts(&self) -> Vec<String> {
        let mut t: Vec<String> = self.texts.keys().cloned().collect();
        t.sort();
        t
    }
}

impl TeacherProvider for SyntheticTeacher {
    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn generator_id(&self) -> String {
        format!("{SYNTHETIC_GENERATOR}:seed={}", self.spec.seed)
    }

    fn image_feature(&self, sample: &str) -> Result<Vec<f64>> {
        self.images.get(sample).cloned().ok_or_else(|| Error::MissingSample(sample.to_string()))
    }

    /// Unknown texts get a hash-seeded random unit vector.
    fn text_feature(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(f) = self.texts.get(text) {
            return Ok(f.clone());
        }
        let mut rng = derived_rng(self.spec.seed, 5, u64::from(crc32fast::hash(text.as_bytes())), text.len() as u64);
        Ok(unit(gaussian(&mut rng, self.spec.embed_dim, 1.0)))
    }

    fn token_encoder(&self) -> Option<&dyn TokenTextEncoder> {
        Some(&self.encoder)
    }
}

pub const IMAGE_CACHE_FILE: &str = "image.vlmd";
pub const TEXT_CACHE_FILE: &str = "text.vlmd";

/// Teacher backed by two feature-cache files: image features keyed by
/// sample id and text features keyed by exact text.
#[derive(Debug, Clone)]
pub struct CachedTeacher {
    generator: String,
    dim: usize,
    images: HashMap<String, Vec<f64>>,
    texts: HashMap<String, Vec<f64>>,
}

/// Opens `dir/image.vlmd` and `dir/text.vlmd`.
pub fn cached_teacher(dir: impl AsRef<Path>) -> Result<CachedTeacher> {
    let dir = dir.as_ref();
    CachedTeacher::open(dir.join(IMAGE_CACHE_FILE), dir.join(TEXT_CACHE_FILE))
}

impl CachedTeacher {
    pub fn open(image_cache: impl AsRef<Path>, text_cache: impl AsRef<Path>) -> Result<Self> {
        let (img, img_meta) = cache_read(image_cache)?;
        let (txt, txt_meta) = cache_read(text_cache)?;
        if img.dim() != txt.dim() {
            return Err(Error::CacheCorrupt(format!("image dim {} differs from text dim {}", img.dim(), txt.dim())));
        }
        if txt_meta.texts.len() != txt.rows() {
            return Err(Error::CacheCorrupt("text cache lacks one text per row".into()));
        }
        let images = img.ids().iter().cloned().zip(img.iter_rows().map(<[f64]>::to_vec)).collect();
        let texts = txt_meta.texts.iter().cloned().zip(txt.iter_rows().map(<[f64]>::to_vec)).collect();
        Ok(Self { generator: img_meta.generator, dim: img.dim(), images, texts })
    }
}

impl TeacherProvider for CachedTeacher {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn generator_id(&self) -> String {
        self.generator.clone()
    }

    fn image_feature(&self, sample: &str) -> Result<Vec<f64>> {
        self.images.get(sample).cloned().ok_or_else(|| Error::MissingSample(sample.to_string()))
    }

    fn text_feature(&self, text: &str) -> Result<Vec<f64>> {
        self.texts.get(text).cloned().ok_or_else(|| Error::MissingText(text.to_string()))
    }
}

/// Writes the features of `samples` and `texts` from `teacher` as a cache
/// directory readable by [`cached_teacher`].
pub fn export_teacher(
    teacher: &dyn TeacherProvider,
    samples: &[String],
    texts: &[String],
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let generator = teacher.generator_id();
    let images = teacher.image_features(samples)?;
    cache_write(&dir.join(IMAGE_CACHE_FILE), &images, &CacheMeta::new(&generator))?;
    let mut unique: BTreeMap<&String, ()> = BTreeMap::new();
    texts.iter().for_each(|t| {
        unique.insert(t, ());
    });
    let texts: Vec<String> = unique.into_keys().cloned().collect();
    let ids: Vec<String> = (0..texts.len()).map(|i| format!("t{i}")).collect();
    let text_m = teacher.text_features(&ids, &texts)?;
    let meta = CacheMeta { texts, ..CacheMeta::new(&generator) };
    cache_write(&dir.join(TEXT_CACHE_FILE), &text_m, &meta)
}
