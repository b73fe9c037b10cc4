//! End-to-end synthetic runs: build the dataset, distill, evaluate ID and
//! OOD accuracy, optionally finetune few-shot, and collect alignment metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::{draw_fewshot, synthetic_dataset, SplitDataset, SyntheticDataSpec};
use crate::enrich::{encode_learned_prompt, CaptionSet, LearnedPrompt, PromptStyle};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMatrix};
use crate::metrics::MetricReport;
use crate::persist::ResultRow;
use crate::student::{StudentModel, StudentSpec};
use crate::teacher::{SyntheticTeacher, TeacherProvider};
use crate::trainer::{
    alignment_reports, evaluate, fewshot_finetune, train, DistillSet, EvalTarget, LabelTexts, PromptTraining,
    TrainConfig, TrainJob, TrainLog,
};

/// Run config file: `[data]`, `[train]` and a few run-level keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub style: PromptStyle,
    pub fewshot: bool,
    pub k_neigh: usize,
    pub k_vlalign: usize,
    pub data: SyntheticDataSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "run".into(),
            style: PromptStyle::Plain,
            fewshot: true,
            k_neigh: 10,
            k_vlalign: 5,
            data: SyntheticDataSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        s.train.validate()?;
        s.data.teacher.validate()?;
        Ok(s)
    }

    /// Copy with every seed (data, teacher, training) set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.data.teacher.seed = seed;
        s.data.split_seed = None;
        s.train.seed = seed;
        s
    }
}

/// Everything the synthetic pipeline prepares before training. Teacher
/// features come from the synthetic teacher unless a cached provider is
/// given, in which case it must cover every sample and label text.
pub struct Prepared {
    pub dataset: SplitDataset,
    pub teacher: SyntheticTeacher,
    pub texts: LabelTexts,
    pub train: DistillSet,
    pub id_eval: DistillSet,
    pub ood_eval: DistillSet,
    /// Generator id of the teacher that produced the features.
    pub generator: String,
    token_access: bool,
}

impl Prepared {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        Self::with_provider(spec, None, None)
    }

    /// `captions`, when given, attach to the training split.
    pub fn with_provider(
        spec: &ExperimentSpec,
        provider: Option<&dyn TeacherProvider>,
        captions: Option<&CaptionSet>,
    ) -> Result<Self> {
        let (dataset, teacher) = synthetic_dataset(&spec.data)?;
        let p: &dyn TeacherProvider = provider.unwrap_or(&teacher);
        let labels: Vec<String> = dataset.labels.all().cloned().collect();
        let texts = LabelTexts::build(p, &labels, spec.style, teacher.descriptions(), None)?;
        Ok(Self {
            train: DistillSet::build(&dataset.train, p, captions)?,
            id_eval: DistillSet::build(&dataset.id_eval, p, None)?,
            ood_eval: DistillSet::build(&dataset.ood_eval, p, None)?,
            generator: p.generator_id(),
            token_access: p.token_encoder().is_some(),
            dataset,
            teacher,
            texts,
        })
    }

    pub fn id_texts(&self) -> Result<LabelTexts> {
        self.texts.restrict(self.dataset.labels.id_labels())
    }

    pub fn ood_texts(&self) -> Result<LabelTexts> {
        self.texts.restrict(self.dataset.labels.ood_labels())
    }

    pub fn student(&self, spec: &ExperimentSpec) -> Result<StudentModel> {
        let s = StudentSpec {
            input_dim: spec.data.input_dim,
            embed_dim: self.teacher.embed_dim(),
            hidden: spec.train.student.hidden.clone(),
        };
        StudentModel::new(s, spec.train.seed)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub row: ResultRow,
    pub log: TrainLog,
    pub fewshot_log: Option<TrainLog>,
    pub metrics: Vec<MetricReport>,
    pub student: StudentModel,
    pub teacher_generator: String,
}

impl ExperimentOutcome {
    pub fn metric(&self, metric: &str, dataset: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric && m.dataset == dataset).map(|m| m.values[0])
    }
}

/// Text features for every label from a trained prompt context.
fn learned_texts(prompt: &LearnedPrompt, teacher: &SyntheticTeacher, labels: &[String]) -> Result<LabelTexts> {
    let rows = labels
        .iter()
        .map(|l| Ok(encode_learned_prompt(prompt, l, teacher.token_encoder())?.feature))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelTexts::from_features(FeatureMatrix::from_rows(FeatureKind::Text, labels.to_vec(), &rows)?))
}

pub fn run_synthetic(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    run_prepared(spec, &Prepared::new(spec)?)
}

pub fn run_prepared(spec: &ExperimentSpec, prep: &Prepared) -> Result<ExperimentOutcome> {
    let mut student = prep.student(spec)?;
    let cfg = &spec.train;
    let mut texts = prep.texts.clone();
    let mut prompt = if cfg.prompt_learning {
        if !prep.token_access {
            return Err(Error::EncoderLacksTokenAccess);
        }
        let encoder = prep.teacher.token_encoder().ok_or(Error::EncoderLacksTokenAccess)?;
        Some(LearnedPrompt::random(cfg.prompt_tokens, encoder.token_dim(), 0.02, cfg.seed)?)
    } else {
        None
    };

    let id_texts = prep.id_texts()?;
    let ood_texts = prep.ood_texts()?;
    let mut job = TrainJob::new(&prep.train, &id_texts)
        .eval(EvalTarget { name: "id", data: &prep.id_eval, texts: &id_texts })
        .eval(EvalTarget { name: "ood", data: &prep.ood_eval, texts: &ood_texts });
    if let (Some(p), Some(encoder)) = (prompt.as_mut(), prep.teacher.token_encoder()) {
        job.prompt = Some(PromptTraining { prompt: p, encoder });
    }
    let log = train(&mut student, job, cfg)?;
    if let Some(p) = &prompt {
        let labels: Vec<String> = prep.dataset.labels.all().cloned().collect();
        texts = learned_texts(p, &prep.teacher, &labels)?;
    }
    let id_texts = texts.restrict(prep.dataset.labels.id_labels())?;
    let ood_texts = texts.restrict(prep.dataset.labels.ood_labels())?;
    let id_acc = if prompt.is_some() {
        evaluate(&student, &prep.id_eval, &id_texts, None)?.accuracy
    } else {
        log.last_eval("id", cfg.report_last).unwrap_or(0.0)
    };
    let zero_shot = if prompt.is_some() {
        evaluate(&student, &prep.ood_eval, &ood_texts, None)?.accuracy
    } else {
        log.last_eval("ood", cfg.report_last).unwrap_or(0.0)
    };

    let mut metrics = alignment_reports(&student, &prep.train, &id_texts, "train", spec.k_neigh, spec.k_vlalign)?;
    metrics.extend(alignment_reports(&student, &prep.ood_eval, &ood_texts, "ood", spec.k_neigh, spec.k_vlalign)?);

    let (few_shot, fewshot_log) = if spec.fewshot && cfg.fewshot.epochs > 0 {
        let draw = draw_fewshot(&prep.dataset.ood_eval, prep.dataset.labels.ood_labels(), cfg.fewshot.shots, cfg.seed)?;
        let support = prep.ood_eval.by_ids(&draw.ids())?;
        let query_ids: Vec<String> = prep.ood_eval.ids.iter().filter(|id| !draw.contains(id)).cloned().collect();
        let query = prep.ood_eval.by_ids(&query_ids)?;
        let mut tuned = student.clone();
        let out = fewshot_finetune(&mut tuned, &prep.train, &support, &texts, &[], cfg)?;
        (Some(evaluate(&tuned, &query, &ood_texts, None)?.accuracy * 100.0), Some(out.log))
    } else {
        (None, None)
    };

    Ok(ExperimentOutcome {
        row: ResultRow {
            name: spec.name.clone(),
            id_acc: id_acc * 100.0,
            zero_shot_ood: zero_shot * 100.0,
            few_shot_ood: few_shot,
        },
        log,
        fewshot_log,
        metrics,
        student,
        teacher_generator: prep.generator.clone(),
    })
}
