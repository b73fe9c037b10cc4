//! Base distillation, balanced few-shot finetuning, the training-free
//! retrieval baseline and evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{names, LossConfig};
use crate::dataset::Sample;
use crate::enrich::{
    build_label_text, encode_learned_prompt, CaptionSet, DescriptionCache, LearnedPrompt, PromptEncoding, PromptStyle,
    TokenTextEncoder,
};
use crate::error::{Error, Result};
use crate::features::{argmax, softmax_in_place, unit_cosine, FeatureKind, FeatureMatrix, Matrix};
use crate::losses::{
    combine, loss_cap, loss_cls, loss_cls_text_grad, loss_im_cst_masked, loss_mse, loss_vlprox_with,
    teacher_alignment_mask, LossResult,
};
use crate::metrics::{metric_neigh, metric_rel, metric_vlalign, MetricReport};
use crate::optim::{Schedule, Sgd, SgdConfig};
use crate::persist::write_atomic;
use crate::student::{StudentModel, StudentSpec};
use crate::teacher::TeacherProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub epochs: usize,
    pub shots: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        Self { epochs: 100, shots: 5, batch_size: 128, schedule: Schedule::one_cycle(0.003) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 5.5 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::ConfigInvalid(format!("need alpha >= 0 and beta > 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Enabled losses, by name.
    pub losses: Vec<String>,
    pub loss: LossConfig,
    pub optimizer: SgdConfig,
    pub schedule: Schedule,
    pub prompt_learning: bool,
    pub prompt_tokens: usize,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Final numbers average this many trailing epochs, which are always
    /// evaluated.
    pub report_last: usize,
    /// Where to write the state dump when a loss diverges.
    pub dump_dir: Option<PathBuf>,
    pub student: StudentSpec,
    pub fewshot: FewshotConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 450,
            batch_size: 128,
            seed: 0,
            losses: vec![names::CLS.to_string()],
            loss: LossConfig::default(),
            optimizer: SgdConfig::default(),
            schedule: Schedule::step_decay(0.05),
            prompt_learning: false,
            prompt_tokens: crate::enrich::DEFAULT_CONTEXT_TOKENS,
            eval_every: 0,
            report_last: 5,
            dump_dir: None,
            student: StudentSpec::default(),
            fewshot: FewshotConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        if self.fewshot.batch_size < 2 {
            return Err(Error::ConfigInvalid("few-shot batch_size must be at least 2".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::ConfigInvalid("no losses enabled".into()));
        }
        for l in &self.losses {
            if !names::ALL.contains(&l.as_str()) {
                return Err(Error::ConfigInvalid(format!("unknown loss {l:?}")));
            }
        }
        if self.prompt_learning && self.prompt_tokens == 0 {
            return Err(Error::ConfigInvalid("prompt_tokens must be positive".into()));
        }
        self.loss.validate()?;
        self.schedule.validate()?;
        self.fewshot.schedule.validate()?;
        self.retrieval.validate()?;
        self.student.validate()
    }

    pub fn enabled(&self, name: &str) -> bool {
        self.losses.iter().any(|l| l == name)
    }

    fn weights(&self) -> BTreeMap<String, f64> {
        self.losses.iter().map(|l| (l.clone(), self.loss.weight(l))).collect()
    }
}

/// Label texts and their teacher features, one row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTexts {
    pub labels: Vec<String>,
    pub texts: Vec<String>,
    pub features: FeatureMatrix,
}

impl LabelTexts {
    pub fn build(
        teacher: &dyn TeacherProvider,
        labels: &[String],
        style: PromptStyle,
        cache: &DescriptionCache,
        generator: Option<&str>,
    ) -> Result<Self> {
        let texts = labels.iter().map(|l| build_label_text(l, style, cache, generator)).collect::<Result<Vec<_>>>()?;
        let features = teacher.text_features(labels, &texts)?;
        Ok(Self { labels: labels.to_vec(), texts, features })
    }

    pub fn from_features(features: FeatureMatrix) -> Self {
        let labels = features.ids().to_vec();
        Self { texts: labels.clone(), labels, features }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows for `subset`, in subset order.
    pub fn restrict(&self, subset: &[String]) -> Result<Self> {
        let idx = subset.iter().map(|l| crate::labels::label_index(&self.labels, l)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            labels: subset.to_vec(),
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            features: self.features.select(&idx)?,
        })
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        let mut texts = self.texts.clone();
        texts.extend(other.texts.iter().cloned());
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let features = FeatureMatrix::new(FeatureKind::Text, labels.clone(), self.features.dim(), data)?;
        Ok(Self { labels, texts, features })
    }
}

/// Student inputs paired with precomputed teacher features.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub input_dim: usize,
    pub inputs: Vec<f64>,
    pub teacher: FeatureMatrix,
    /// Teacher features of each sample's caption, when every sample has one.
    pub captions: Option<FeatureMatrix>,
}

impl DistillSet {
    /// Captions come from `captions` first, then from the sample itself.
    pub fn build(samples: &[Sample], teacher: &dyn TeacherProvider, captions: Option<&CaptionSet>) -> Result<Self> {
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let input_dim = samples.first().and_then(|s| s.input.as_ref()).map_or(0, Vec::len);
        let mut inputs = Vec::with_capacity(samples.len() * input_dim);
        for s in samples {
            let x = s.input.as_ref().ok_or_else(|| Error::MissingSample(format!("{} has no student input", s.id)))?;
            if x.len() != input_dim {
                return Err(Error::DimMismatch { expected: input_dim, got: x.len() });
            }
            inputs.extend_from_slice(x);
        }
        let texts: Option<Vec<String>> = samples
            .iter()
            .map(|s| captions.and_then(|c| c.get(&s.id)).or(s.caption.as_deref()).map(String::from))
            .collect();
        let captions = match texts {
            Some(t) if !t.is_empty() => Some(teacher.text_features(&ids, &t)?),
            _ => None,
        };
        Ok(Self {
            labels: samples.iter().map(|s| s.label.clone()).collect(),
            teacher: teacher.image_features(&ids)?,
            ids,
            input_dim,
            inputs,
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            input_dim: self.input_dim,
            inputs: self.batch_inputs(idx),
            teacher: self.teacher.select(idx)?,
            captions: self.captions.as_ref().map(|c| c.select(idx)).transpose()?,
        })
    }

    /// Rows whose ids are in `ids`, in `ids` order.
    pub fn by_ids(&self, ids: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let idx = ids
            .iter()
            .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| Error::MissingSample(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_dim != other.input_dim {
            return Err(Error::DimMismatch { expected: self.input_dim, got: other.input_dim });
        }
        let join = |a: &FeatureMatrix, b: &FeatureMatrix| -> Result<FeatureMatrix> {
            let mut ids = a.ids().to_vec();
            ids.extend_from_slice(b.ids());
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            FeatureMatrix::new(a.kind(), ids, a.dim(), data)
        };
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let captions = match (&self.captions, &other.captions) {
            (Some(a), Some(b)) => Some(join(a, b)?),
            _ => None,
        };
        Ok(Self {
            ids,
            labels,
            input_dim: self.input_dim,
            inputs,
            teacher: join(&self.teacher, &other.teacher)?,
            captions,
        })
    }

    pub fn batch_inputs(&self, idx: &[usize]) -> Vec<f64> {
        let d = self.input_dim;
        idx.iter().flat_map(|&i| self.inputs[i * d..(i + 1) * d].iter().copied()).collect()
    }

    /// Position of every sample's label in `texts`.
    pub fn label_indices(&self, texts: &LabelTexts) -> Result<Vec<usize>> {
        let pos: HashMap<&str, usize> = texts.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        self.labels.iter().map(|l| pos.get(l.as_str()).copied().ok_or_else(|| Error::UnknownLabel(l.clone()))).collect()
    }

    pub fn student_features(&self, student: &StudentModel) -> Result<FeatureMatrix> {
        student.forward(&self.ids, &self.inputs)
    }
}

/// A held-out set evaluated during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget<'a> {
    pub name: &'a str,
    pub data: &'a DistillSet,
    pub texts: &'a LabelTexts,
}

/// Learned prompt context for `L_cls`, trained alongside the student.
pub struct PromptTraining<'a> {
    pub prompt: &'a mut LearnedPrompt,
    pub encoder: &'a dyn TokenTextEncoder,
}

pub struct TrainJob<'a> {
    pub data: &'a DistillSet,
    pub texts: &'a LabelTexts,
    pub evals: Vec<EvalTarget<'a>>,
    pub prompt: Option<PromptTraining<'a>>,
}

impl<'a> TrainJob<'a> {
    pub fn new(data: &'a DistillSet, texts: &'a LabelTexts) -> Self {
        Self { data, texts, evals: Vec::new(), prompt: None }
    }

    pub fn eval(mut self, target: EvalTarget<'a>) -> Self {
        self.evals.push(target);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainLog {
    /// Mean of the weighted total over the trailing `n` epochs.
    pub fn last_total(&self, n: usize) -> Option<f64> {
        let tail = &self.epochs[self.epochs.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.total).sum::<f64>() / tail.len() as f64)
    }

    /// Mean of eval metric `key` over the trailing `n` epochs that have it.
    pub fn last_eval(&self, key: &str, n: usize) -> Option<f64> {
        let tail = &self.epochs[self.epochs.len().saturating_sub(n)..];
        let vals: Vec<f64> = tail.iter().filter_map(|e| e.eval.get(key).copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_lines(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }
}

struct StepInputs<'a> {
    data: &'a DistillSet,
    y: &'a [usize],
    texts: &'a FeatureMatrix,
    prompt_texts: Option<&'a FeatureMatrix>,
}

fn batch_losses(
    student_feats: &FeatureMatrix,
    idx: &[usize],
    inputs: &StepInputs<'_>,
    config: &TrainConfig,
) -> Result<BTreeMap<String, LossResult>> {
    let c = &config.loss;
    let y: Vec<usize> = idx.iter().map(|&i| inputs.y[i]).collect();
    let needs_teacher = [names::MSE, names::IM_CST, names::VLPROX].iter().any(|n| config.enabled(n)) || c.imcst_filter;
    let teacher = if needs_teacher { Some(inputs.data.teacher.select(idx)?) } else { None };
    let teacher = || teacher.as_ref().expect("teacher batch selected");
    let mut out = BTreeMap::new();
    for name in &config.losses {
        let loss = match name.as_str() {
            names::CLS => loss_cls(student_feats, inputs.prompt_texts.unwrap_or(inputs.texts), &y, c.tau_cls)?,
            names::MSE => loss_mse(student_feats, teacher())?,
            names::IM_CST => {
                let keep =
                    if c.imcst_filter { Some(teacher_alignment_mask(teacher(), inputs.texts, &y)?) } else { None };
                loss_im_cst_masked(student_feats, teacher(), c.tau_imcst, keep.as_deref())?
            }
            names::VLPROX => {
                loss_vlprox_with(student_feats, teacher(), inputs.texts, &y, c.tau_cls, c.k_vlprox, c.vlprox_filter)?
            }
            names::CAP => {
                let caps =
                    inputs.data.captions.as_ref().ok_or_else(|| Error::MissingCaptions("training set".into()))?;
                loss_cap(student_feats, &caps.select(idx)?, &y, c.tau_cap)?
            }
            other => return Err(Error::ConfigInvalid(format!("unknown loss {other:?}"))),
        };
        out.insert(name.clone(), loss);
    }
    Ok(out)
}

#[derive(Serialize)]
struct StateDump<'a> {
    epoch: usize,
    step: usize,
    losses: BTreeMap<&'a str, f64>,
    params: &'a [f64],
}

fn diverged(
    config: &TrainConfig,
    student: &StudentModel,
    losses: &BTreeMap<String, LossResult>,
    epoch: usize,
    step: usize,
) -> Error {
    let bad = losses.iter().find(|(_, l)| !l.value.is_finite()).map_or("total", |(n, _)| n.as_str());
    if let Some(dir) = &config.dump_dir {
        let dump = StateDump {
            epoch,
            step,
            losses: losses.iter().map(|(n, l)| (n.as_str(), l.value)).collect(),
            params: student.params(),
        };
        // best effort: the divergence itself is the error to report
        if std::fs::create_dir_all(dir).is_ok() {
            if let Ok(bytes) = serde_json::to_vec(&dump) {
                let _ = write_atomic(&dir.join("diverged.json"), &bytes);
            }
        }
    }
    Error::DivergedLoss { loss: bad.to_string(), epoch, step }
}

struct PromptState<'a> {
    training: PromptTraining<'a>,
    labels: Vec<String>,
    opt: Sgd,
}

impl PromptState<'_> {
    fn encode(&self) -> Result<(FeatureMatrix, Vec<PromptEncoding>)> {
        let enc = self
            .labels
            .iter()
            .map(|l| encode_learned_prompt(self.training.prompt, l, Some(self.training.encoder)))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f64>> = enc.iter().map(|e| e.feature.clone()).collect();
        Ok((FeatureMatrix::from_rows(FeatureKind::Text, self.labels.clone(), &rows)?, enc))
    }
}

/// Runs one optimization loop over batches produced by `next_epoch`.
#[allow(clippy::too_many_arguments)]
fn optimize(
    student: &mut StudentModel,
    data: &DistillSet,
    texts: &LabelTexts,
    evals: &[EvalTarget<'_>],
    mut prompt: Option<PromptState<'_>>,
    config: &TrainConfig,
    epochs: usize,
    schedule: &Schedule,
    mut next_epoch: impl FnMut() -> Vec<Vec<usize>>,
    batches_per_epoch: usize,
) -> Result<TrainLog> {
    let y = data.label_indices(texts)?;
    let weights = config.weights();
    let mut opt = Sgd::new(config.optimizer.clone(), student.param_count());
    let total_steps = epochs * batches_per_epoch;
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        let mut seen = 0usize;
        let mut lr = 0.0;
        for idx in next_epoch() {
            lr = schedule.lr(log.steps, total_steps, epochs);
            let tape = student.forward_tape(&data.ids_at(&idx), &data.batch_inputs(&idx))?;
            let encoded = prompt.as_ref().map(PromptState::encode).transpose()?;
            let inputs =
                StepInputs { data, y: &y, texts: &texts.features, prompt_texts: encoded.as_ref().map(|(f, _)| f) };
            let losses = batch_losses(tape.outputs(), &idx, &inputs, config)?;
            let combined = combine(&losses, &weights)?;
            if !combined.value.is_finite() || !combined.grad.is_finite() {
                return Err(diverged(config, student, &losses, epoch, log.steps));
            }
            let grad = student.backward(&tape, &combined.grad)?;
            if let (Some(state), Some((feats, enc))) = (prompt.as_mut(), encoded.as_ref()) {
                let w = weights.get(names::CLS).copied().unwrap_or(0.0);
                if w != 0.0 {
                    let by: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                    let tg = loss_cls_text_grad(tape.outputs(), feats, &by, config.loss.tau_cls)?;
                    let mut g = vec![0.0; state.training.prompt.context.len()];
                    for (c, e) in enc.iter().enumerate() {
                        let row: Vec<f64> = tg.row(c).iter().map(|v| v * w).collect();
                        e.context_grad(state.training.encoder, &row).iter().zip(&mut g).for_each(|(a, b)| *b += a);
                    }
                    state.opt.step(&mut state.training.prompt.context, &g, lr);
                }
            }
            opt.step(student.params_mut(), &grad, lr);
            let b = idx.len() as f64;
            for (n, l) in &losses {
                *sums.entry(n.clone()).or_default() += l.value * b;
            }
            total += combined.value * b;
            seen += idx.len();
            log.steps += 1;
        }
        let denom = seen.max(1) as f64;
        let mut entry = EpochLog {
            epoch,
            lr,
            losses: sums.into_iter().map(|(n, v)| (n, v / denom)).collect(),
            total: total / denom,
            eval: BTreeMap::new(),
        };
        let due = epoch + config.report_last.max(1) >= epochs
            || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0);
        if due {
            for t in evals {
                entry.eval.insert(t.name.to_string(), evaluate(student, t.data, t.texts, None)?.accuracy);
            }
        }
        log.epochs.push(entry);
    }
    Ok(log)
}

impl DistillSet {
    fn ids_at(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.ids[i].clone()).collect()
    }
}

fn check_inputs(config: &TrainConfig, data: &DistillSet) -> Result<()> {
    config.validate()?;
    if config.enabled(names::CAP) && data.captions.is_none() {
        return Err(Error::MissingCaptions("every training sample needs a caption".into()));
    }
    Ok(())
}

/// Base distillation on the training split.
pub fn train(student: &mut StudentModel, job: TrainJob<'_>, config: &TrainConfig) -> Result<TrainLog> {
    check_inputs(config, job.data)?;
    let n = job.data.len();
    let b = config.batch_size;
    let prompt = job.prompt.map(|training| {
        let len = training.prompt.context.len();
        PromptState { training, labels: job.texts.labels.clone(), opt: Sgd::new(config.optimizer.clone(), len) }
    });
    if config.prompt_learning && prompt.is_none() {
        return Err(Error::EncoderLacksTokenAccess);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let next_epoch = move || {
        order.shuffle(&mut rng);
        order.chunks(b).map(<[usize]>::to_vec).collect::<Vec<_>>()
    };
    optimize(
        student,
        job.data,
        job.texts,
        &job.evals,
        prompt,
        config,
        config.epochs,
        &config.schedule,
        next_epoch,
        n.div_ceil(b),
    )
}

/// Passes over `0..n` without replacement, reshuffled when exhausted.
#[derive(Debug, Clone)]
struct Pass {
    order: Vec<usize>,
    pos: usize,
}

impl Pass {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    /// Next `k` indices of the current pass. With `fill`, a pass that runs
    /// out mid-batch is topped up from a fresh one without repeats.
    fn take(&mut self, k: usize, fill: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let m = k.min(self.order.len() - self.pos);
        let mut out = self.order[self.pos..self.pos + m].to_vec();
        self.pos += m;
        let want = k.min(self.order.len());
        if fill && out.len() < want {
            // start a new pass, with this batch's leftovers moved behind the fill
            self.order.shuffle(rng);
            let taken: HashSet<usize> = out.iter().copied().collect();
            let (fresh, held): (Vec<usize>, Vec<usize>) = self.order.iter().partition(|i| !taken.contains(i));
            self.order = fresh.into_iter().chain(held).collect();
            self.pos = want - out.len();
            out.extend_from_slice(&self.order[..self.pos]);
        }
        out
    }
}

/// Batches of `ceil(B/2)` base samples plus at most `floor(B/2)` few-shot
/// samples. Each epoch is one fresh pass over the base data; the few-shot
/// pool is consumed without replacement across batches and reshuffled once
/// exhausted, so a batch never holds a few-shot sample twice.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    base: Pass,
    few: Pass,
    base_per_batch: usize,
    few_per_batch: usize,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedBatch {
    pub base: Vec<usize>,
    pub fewshot: Vec<usize>,
}

impl BalancedSampler {
    pub fn new(base_len: usize, fewshot_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if fewshot_len == 0 {
            return Err(Error::EmptyFewshotPool);
        }
        if batch_size < 2 || base_len == 0 {
            return Err(Error::ConfigInvalid("balanced batches need B >= 2 and base data".into()));
        }
        Ok(Self {
            base: Pass::new(base_len),
            few: Pass::new(fewshot_len),
            base_per_batch: batch_size.div_ceil(2),
            few_per_batch: batch_size / 2,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.base.order.len().div_ceil(self.base_per_batch)
    }

    pub fn epoch(&mut self) -> Vec<BalancedBatch> {
        self.base.pos = self.base.order.len();
        (0..self.batches_per_epoch())
            .map(|_| BalancedBatch {
                base: self.base.take(self.base_per_batch, false, &mut self.rng),
                fewshot: self.few.take(self.few_per_batch, true, &mut self.rng),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotOutcome {
    pub log: TrainLog,
    /// Accuracy per eval target before and after finetuning.
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
}

/// Finetunes on few-shot OOD data mixed with base data. `texts` must cover
/// the labels of both sets.
pub fn fewshot_finetune(
    student: &mut StudentModel,
    base: &DistillSet,
    fewshot: &DistillSet,
    texts: &LabelTexts,
    evals: &[EvalTarget<'_>],
    config: &TrainConfig,
) -> Result<FewshotOutcome> {
    if fewshot.is_empty() {
        return Err(Error::EmptyFewshotPool);
    }
    check_inputs(config, base)?;
    let mut before = BTreeMap::new();
    for t in evals {
        before.insert(t.name.to_string(), evaluate(student, t.data, t.texts, None)?.accuracy);
    }
    let joined = base.concat(fewshot)?;
    let offset = base.len();
    let mut sampler = BalancedSampler::new(base.len(), fewshot.len(), config.fewshot.batch_size, config.seed)?;
    let per_epoch = sampler.batches_per_epoch();
    let next_epoch = move || {
        sampler
            .epoch()
            .into_iter()
            .map(|b| b.base.into_iter().chain(b.fewshot.into_iter().map(|i| i + offset)).collect())
            .collect()
    };
    let log = optimize(
        student,
        &joined,
        texts,
        &[],
        None,
        config,
        config.fewshot.epochs,
        &config.fewshot.schedule,
        next_epoch,
        per_epoch,
    )?;
    let mut after = BTreeMap::new();
    for t in evals {
        after.insert(t.name.to_string(), evaluate(student, t.data, t.texts, None)?.accuracy);
    }
    Ok(FewshotOutcome { log, before, after })
}

/// Key-value cache of few-shot features (keys) and label indices (values).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalCache {
    dim: usize,
    keys: Vec<f64>,
    labels: Vec<usize>,
}

impl RetrievalCache {
    pub fn new(dim: usize) -> Self {
        Self { dim, keys: Vec::new(), labels: Vec::new() }
    }

    pub fn from_features(features: &FeatureMatrix, labels: &[usize]) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch("one label per cached feature".into()));
        }
        Ok(Self { dim: features.dim(), keys: features.data().to_vec(), labels: labels.to_vec() })
    }

    pub fn push(&mut self, key: &[f64], label: usize) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: key.len() });
        }
        self.keys.extend_from_slice(key);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn entries(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.keys.chunks_exact(self.dim.max(1)).zip(self.labels.iter().copied())
    }
}

/// Cache-blended logits: `alpha * A(q Fᵀ) L + q Tᵀ` with
/// `A(z) = exp(-beta (1 - z))`.
pub fn retrieval_logits(
    query: &FeatureMatrix,
    cache: &RetrievalCache,
    text: &FeatureMatrix,
    cfg: RetrievalConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if cache.dim != query.dim() {
        return Err(Error::DimMismatch { expected: query.dim(), got: cache.dim });
    }
    query.check_dim(text)?;
    if let Some(&index) = cache.labels.iter().find(|&&y| y >= text.rows()) {
        return Err(Error::LabelOutOfRange { index, classes: text.rows() });
    }
    let c = text.rows();
    let mut out = Matrix::zeros(query.rows(), c);
    let mut affinity = vec![0.0; c];
    for (i, q) in query.iter_rows().enumerate() {
        affinity.iter_mut().for_each(|a| *a = 0.0);
        for (f, y) in cache.entries() {
            affinity[y] += (-cfg.beta * (1.0 - unit_cosine(q, f))).exp();
        }
        for (y, t) in text.iter_rows().enumerate() {
            out.data[i * c + y] = cfg.alpha * affinity[y] + unit_cosine(q, t);
        }
    }
    Ok(out)
}

pub fn retrieval_probs(
    query: &FeatureMatrix,
    cache: &RetrievalCache,
    text: &FeatureMatrix,
    cfg: RetrievalConfig,
) -> Result<Matrix> {
    let mut m = retrieval_logits(query, cache, text, cfg)?;
    for i in 0..m.rows {
        softmax_in_place(m.row_mut(i));
    }
    Ok(m)
}

/// Training-free few-shot prediction with the student as the visual
/// encoder. Returns class probabilities for each query.
pub fn retrieval_fewshot(
    student: &StudentModel,
    fewshot: &DistillSet,
    queries: &DistillSet,
    texts: &LabelTexts,
    cfg: RetrievalConfig,
) -> Result<Matrix> {
    let cache = RetrievalCache::from_features(&fewshot.student_features(student)?, &fewshot.label_indices(texts)?)?;
    let q = queries.student_features(student)?;
    retrieval_probs(&q, &cache, &texts.features, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<MetricReport>,
}

/// Top-1 zero-shot accuracy over the samples whose label is in `label_set`
/// (all of `texts` when `None`), predicting among `label_set` only.
pub fn evaluate(
    student: &StudentModel,
    data: &DistillSet,
    texts: &LabelTexts,
    label_set: Option<&[String]>,
) -> Result<EvalReport> {
    let restricted;
    let texts = match label_set {
        Some(set) => {
            restricted = texts.restrict(set)?;
            &restricted
        }
        None => texts,
    };
    let allowed: HashSet<&str> = texts.labels.iter().map(String::as_str).collect();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| allowed.contains(data.labels[i].as_str())).collect();
    if idx.is_empty() {
        return Ok(EvalReport { accuracy: 0.0, samples: 0, reports: Vec::new() });
    }
    let subset = data.subset(&idx)?;
    let y = subset.label_indices(texts)?;
    let feats = subset.student_features(student)?;
    let logits = crate::features::cosine_logits(&feats, &texts.features, 1.0)?;
    let correct = (0..feats.rows()).filter(|&i| argmax(logits.row(i)) == y[i]).count();
    Ok(EvalReport { accuracy: correct as f64 / idx.len() as f64, samples: idx.len(), reports: Vec::new() })
}

/// Alignment metrics between student and teacher on `data`.
pub fn alignment_reports(
    student: &StudentModel,
    data: &DistillSet,
    texts: &LabelTexts,
    dataset: &str,
    k_neigh: usize,
    k_vlalign: usize,
) -> Result<Vec<MetricReport>> {
    let s = data.student_features(student)?;
    let n = s.rows();
    Ok(vec![
        MetricReport::new("m_rel", dataset, vec![metric_rel(&s, &data.teacher)?], n),
        MetricReport::new("m_neigh", dataset, vec![metric_neigh(&s, &data.teacher, k_neigh)?], n)
            .with_param("k", k_neigh as f64),
        MetricReport::new(
            "m_vlalign",
            dataset,
            vec![metric_vlalign(&s, &data.teacher, &texts.features, k_vlalign)?],
            n,
        )
        .with_param("k", k_vlalign as f64),
    ])
}

/// Zero-shot accuracy on split 2 before and after few-shot finetuning on
/// split 1. The student passed in is left untouched.
#[allow(clippy::too_many_arguments)]
pub fn sequential_ood_protocol(
    student: &StudentModel,
    base: &DistillSet,
    fewshot1: &DistillSet,
    eval2: &DistillSet,
    texts: &LabelTexts,
    labels1: &[String],
    labels2: &[String],
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let set1: HashSet<&str> = labels1.iter().map(String::as_str).collect();
    if let Some(l) = labels2.iter().find(|l| set1.contains(l.as_str())) {
        return Err(Error::OverlappingSplits(l.clone()));
    }
    let before = evaluate(student, eval2, texts, Some(labels2))?.accuracy;
    let set2: HashSet<&str> = labels2.iter().map(String::as_str).collect();
    let finetune_labels: Vec<String> = texts.labels.iter().filter(|l| !set2.contains(l.as_str())).cloned().collect();
    let finetune_texts = texts.restrict(&finetune_labels)?;
    let mut tuned = student.clone();
    fewshot_finetune(&mut tuned, base, fewshot1, &finetune_texts, &[], config)?;
    let after = evaluate(&tuned, eval2, texts, Some(labels2))?.accuracy;
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_exact_counts() {
        let mut s = BalancedSampler::new(1000, 100, 8, 0).unwrap();
        for b in s.epoch() {
            assert_eq!(b.fewshot.len(), 4);
            assert_eq!(b.base.len(), 4);
        }
    }

    #[test]
    fn sampler_small_pool() {
        let mut s = BalancedSampler::new(40, 3, 8, 1).unwrap();
        for b in s.epoch() {
            let mut f = b.fewshot.clone();
            f.sort_unstable();
            assert_eq!(f, vec![0, 1, 2]);
        }
    }

    #[test]
    fn sampler_rejects_empty_pool() {
        assert!(matches!(BalancedSampler::new(4, 0, 8, 0), Err(Error::EmptyFewshotPool)));
    }

    #[test]
    fn retrieval_alpha_zero_is_zero_shot() {
        let q = FeatureMatrix::from_rows(FeatureKind::StudentVisual, vec!["q".into()], &[vec![0.6, 0.8]]).unwrap();
        let t = FeatureMatrix::from_rows(
            FeatureKind::Text,
            vec!["a".into(), "b".into()],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let cfg = RetrievalConfig { alpha: 0.0, beta: 5.5 };
        let cache = RetrievalCache::from_features(&t, &[0, 0]).unwrap();
        let logits = retrieval_logits(&q, &cache, &t, cfg).unwrap();
        assert_eq!(logits.argmax_rows(), crate::features::predict(&q, &t).unwrap());
        let err = retrieval_logits(&q, &RetrievalCache::new(2), &t, cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyCache));
    }

    #[test]
    fn config_defaults_and_toml() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (450, 128));
        assert_eq!(c.schedule, Schedule::Step { lr: 0.05, gamma: 0.1, milestones: vec![1.0 / 3.0, 2.0 / 3.0] });
        let c = TrainConfig::from_toml(
            "epochs = 3\nlosses = [\"cls\", \"im_cst\"]\n[schedule]\nkind = \"constant\"\nlr = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.enabled("im_cst"));
        assert!(matches!(TrainConfig::from_toml("epoch = 3"), Err(Error::ConfigInvalid(_))));
        assert!(matches!(TrainConfig::from_toml("losses = [\"kd\"]"), Err(Error::ConfigInvalid(_))));
    }
}
