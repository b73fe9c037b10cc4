//! Samples, ID/OOD splits, few-shot draws and the synthetic dataset.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelSpace;
use crate::teacher::{SyntheticTeacher, SyntheticTeacherSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: String,
    /// Student input vector, when the sample is pre-featurized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

pub const SPLITS: [&str; 3] = ["train", "id_eval", "ood_eval"];

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub id_eval: Vec<Sample>,
    pub ood_eval: Vec<Sample>,
    pub labels: LabelSpace,
}

impl SplitDataset {
    pub fn new(train: Vec<Sample>, id_eval: Vec<Sample>, ood_eval: Vec<Sample>, labels: LabelSpace) -> Result<Self> {
        let d = Self { train, id_eval, ood_eval, labels };
        d.validate()?;
        Ok(d)
    }

    /// Train and ID-eval labels in Y_id, OOD-eval labels in Y_ood, ids unique.
    pub fn validate(&self) -> Result<()> {
        let id: HashSet<&str> = self.labels.id_labels().iter().map(String::as_str).collect();
        let ood: HashSet<&str> = self.labels.ood_labels().iter().map(String::as_str).collect();
        for s in self.train.iter().chain(&self.id_eval) {
            if !id.contains(s.label.as_str()) {
                return Err(Error::UnknownLabel(format!("{} (sample {} outside Y_id)", s.label, s.id)));
            }
        }
        for s in &self.ood_eval {
            if !ood.contains(s.label.as_str()) {
                return Err(Error::UnknownLabel(format!("{} (sample {} outside Y_ood)", s.label, s.id)));
            }
        }
        let mut seen = HashSet::new();
        for s in self.train.iter().chain(&self.id_eval).chain(&self.ood_eval) {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "id_eval" => Ok(&self.id_eval),
            "ood_eval" => Ok(&self.ood_eval),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.id_eval).chain(&self.ood_eval)
    }
}

/// Number of ID labels for `n` labels at `ratio`: rounded half up and
/// clamped so both sides are nonempty.
pub fn id_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n - 1)
}

/// Seeded uniform partition into (Y_id, Y_ood); both keep input order.
pub fn split_labels(labels: &[String], seed: u64, ratio: f64) -> Result<(Vec<String>, Vec<String>)> {
    if labels.len() < 2 {
        return Err(Error::TooFewLabels(labels.len()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::ConfigInvalid(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_id = vec![false; labels.len()];
    order[..id_count(labels.len(), ratio)].iter().for_each(|&i| is_id[i] = true);
    let (id, ood): (Vec<_>, Vec<_>) = labels.iter().zip(&is_id).partition(|(_, &f)| f);
    Ok((id.into_iter().map(|(l, _)| l.clone()).collect(), ood.into_iter().map(|(l, _)| l.clone()).collect()))
}

/// A provided split: lines `id<TAB>label` or `ood<TAB>label`.
pub fn read_fixed_split(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<String>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| Error::InputMissing(path.to_path_buf()))?;
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for line in text.lines().map(str::trim_end).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        match line.split_once('\t') {
            Some(("id", label)) => id.push(label.to_string()),
            Some(("ood", label)) => ood.push(label.to_string()),
            _ => return Err(Error::ConfigInvalid(format!("bad split line {line:?}"))),
        }
    }
    LabelSpace::new(id.clone(), ood.clone())?;
    Ok((id, ood))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewshotDraw {
    pub shots: usize,
    pub seed: u64,
    /// Selected sample ids per label.
    pub selected: BTreeMap<String, Vec<String>>,
}

impl FewshotDraw {
    pub fn ids(&self) -> Vec<String> {
        self.selected.values().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.selected.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.selected.values().any(|v| v.iter().any(|s| s == id))
    }
}

/// Draws `min(shots, available)` samples per label of `labels` from `pool`,
/// uniformly without replacement.
pub fn draw_fewshot(pool: &[Sample], labels: &[String], shots: usize, seed: u64) -> Result<FewshotDraw> {
    if shots == 0 {
        return Err(Error::ConfigInvalid("shots must be at least 1".into()));
    }
    let mut selected = BTreeMap::new();
    for (c, label) in labels.iter().enumerate() {
        let mut ids: Vec<&str> = pool.iter().filter(|s| &s.label == label).map(|s| s.id.as_str()).collect();
        if ids.is_empty() {
            return Err(Error::EmptyClass(label.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        ids.shuffle(&mut rng);
        ids.truncate(shots);
        selected.insert(label.clone(), ids.into_iter().map(String::from).collect());
    }
    Ok(FewshotDraw { shots, seed, selected })
}

/// One manifest line: `id<TAB>path<TAB>label[<TAB>caption]`.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| Error::InputMissing(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(Error::ConfigInvalid(format!("{}:{}: expected 3 or 4 fields", path.display(), n + 1)));
        }
        out.push(Sample {
            id: fields[0].to_string(),
            label: fields[2].to_string(),
            input: None,
            path: Some(fields[1].to_string()),
            caption: fields.get(3).map(|c| c.to_string()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDataSpec {
    pub teacher: SyntheticTeacherSpec,
    pub samples_per_class: usize,
    /// Share of each ID class's samples that go to training.
    pub train_fraction: f64,
    pub ood_fraction: f64,
    pub input_dim: usize,
    pub input_noise: f64,
    /// Seed of the label split; defaults to the teacher seed when absent.
    pub split_seed: Option<u64>,
}

impl Default for SyntheticDataSpec {
    fn default() -> Self {
        Self {
            teacher: SyntheticTeacherSpec::default(),
            samples_per_class: 40,
            train_fraction: 0.75,
            ood_fraction: 0.5,
            input_dim: 32,
            input_noise: 0.05,
            split_seed: None,
        }
    }
}

impl SyntheticDataSpec {
    /// (train, id_eval) sample counts per ID class.
    pub fn id_allocation(&self) -> (usize, usize) {
        let train =
            ((self.train_fraction * self.samples_per_class as f64 + 0.5).floor() as usize).min(self.samples_per_class);
        (train, self.samples_per_class - train)
    }
}

/// Labelled samples whose inputs are a fixed random nonlinear view of the
/// teacher latent: `x = tanh(A z) + input_noise * eta`.
pub fn synthetic_dataset(spec: &SyntheticDataSpec) -> Result<(SplitDataset, SyntheticTeacher)> {
    if spec.samples_per_class == 0 || spec.input_dim == 0 {
        return Err(Error::BadSpec("samples_per_class and input_dim must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.train_fraction) || !(0.0..1.0).contains(&spec.ood_fraction) {
        return Err(Error::BadSpec("fractions outside [0, 1]".into()));
    }
    let mut teacher = SyntheticTeacher::new(spec.teacher.clone())?;
    let labels = teacher.labels();
    let (id_labels, ood_labels) =
        split_labels(&labels, spec.split_seed.unwrap_or(spec.teacher.seed), 1.0 - spec.ood_fraction)?;
    let space = LabelSpace::new(id_labels, ood_labels)?;

    let d = spec.teacher.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.teacher.seed);
    rng.set_stream(7);
    let scale = 1.5 / (d as f64).sqrt();
    let a: Vec<f64> = (0..spec.input_dim * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();

    let (n_train, _) = spec.id_allocation();
    let mut train = Vec::new();
    let mut id_eval = Vec::new();
    let mut ood_eval = Vec::new();
    for (c, label) in labels.iter().enumerate() {
        let is_id = space.side(label) == Some(crate::labels::LabelSide::Id);
        for k in 0..spec.samples_per_class {
            let id = format!("{label}_{k:04}");
            let z = teacher.add_sample(&id, c, k as u64)?;
            let mut noise = ChaCha8Rng::seed_from_u64(spec.teacher.seed ^ 0x5eed);
            noise.set_stream(((c as u64) << 32) | k as u64);
            let input = (0..spec.input_dim)
                .map(|r| {
                    let pre: f64 = a[r * d..(r + 1) * d].iter().zip(&z).map(|(x, y)| x * y).sum();
                    pre.tanh() + spec.input_noise * noise.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let sample = Sample { id, label: label.clone(), input: Some(input), path: None, caption: None };
            match (is_id, k < n_train) {
                (true, true) => train.push(sample),
                (true, false) => id_eval.push(sample),
                (false, _) => ood_eval.push(sample),
            }
        }
    }
    Ok((SplitDataset::new(train, id_eval, ood_eval, space)?, teacher))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn flowers_split_sizes() {
        let (id, ood) = split_labels(&names(102), 0, 0.5).unwrap();
        assert_eq!((id.len(), ood.len()), (51, 51));
        assert_eq!(split_labels(&names(102), 0, 0.5).unwrap(), (id, ood));
    }

    #[test]
    fn too_few_labels() {
        assert!(matches!(split_labels(&names(1), 0, 0.5), Err(Error::TooFewLabels(1))));
    }

    #[test]
    fn fewshot_clamps_and_rejects_empty() {
        let pool: Vec<Sample> = (0..3)
            .map(|i| Sample { id: format!("s{i}"), label: "a".into(), input: None, path: None, caption: None })
            .collect();
        let draw = draw_fewshot(&pool, &["a".into()], 5, 1).unwrap();
        assert_eq!(draw.len(), 3);
        assert!(matches!(draw_fewshot(&pool, &["b".into()], 5, 1), Err(Error::EmptyClass(l)) if l == "b"));
    }

    #[test]
    fn synthetic_counts() {
        let spec = SyntheticDataSpec {
            samples_per_class: 20,
            teacher: SyntheticTeacherSpec { num_classes: 32, ..Default::default() },
            ..Default::default()
        };
        let (d, _) = synthetic_dataset(&spec).unwrap();
        assert_eq!(d.labels.id_labels().len(), 16);
        assert_eq!(d.labels.ood_labels().len(), 16);
        assert_eq!(d.train.len(), 16 * 15);
        assert_eq!(d.id_eval.len(), 16 * 5);
        assert_eq!(d.ood_eval.len(), 16 * 20);
    }

    #[test]
    fn manifest_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "# id\tpath\tlabel\na\timg/a.jpg\trose\nb\timg/b.jpg\tlotus\tcap-b\n").unwrap();
        let s = read_manifest(&p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].caption.as_deref(), Some("cap-b"));
        fs::write(&p, "a\tb\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }

    #[test]
    fn unknown_split() {
        let spec = SyntheticDataSpec { samples_per_class: 2, ..Default::default() };
        let (d, _) = synthetic_dataset(&spec).unwrap();
        assert!(matches!(d.split("val"), Err(Error::UnknownSplit(_))));
    }
}
