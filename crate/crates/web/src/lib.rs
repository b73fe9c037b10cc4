//! Browser demo: distill a small synthetic student, then probe it with the
//! retrieval few-shot classifier and the text-feature spectrum.
//!
//! Every export returns a JSON string; errors surface as rejected strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use vlmd::dataset::{draw_fewshot, SyntheticDataSpec};
use vlmd::enrich::PromptStyle;
use vlmd::experiment::{run_prepared, ExperimentSpec, Prepared};
use vlmd::metrics::{pairwise_cosine_mean, text_spectrum, MetricReport};
use vlmd::optim::Schedule;
use vlmd::persist::ResultRow;
use vlmd::teacher::SyntheticTeacherSpec;
use vlmd::trainer::{evaluate, retrieval_fewshot, LabelTexts, RetrievalConfig};
use vlmd::{Error, Result, StudentModel};

#[derive(Serialize)]
struct CurvePoint {
    epoch: usize,
    total: f64,
    id: Option<f64>,
    ood: Option<f64>,
}

#[derive(Serialize)]
pub struct TrainSummary {
    row: ResultRow,
    curve: Vec<CurvePoint>,
    metrics: Vec<MetricReport>,
}

#[derive(Serialize)]
pub struct RetrievalSummary {
    shots: usize,
    alpha: f64,
    beta: f64,
    accuracy: f64,
    zero_shot: f64,
    samples: usize,
}

#[derive(Serialize)]
pub struct StyleSpectrum {
    style: PromptStyle,
    singular_values: Vec<f64>,
    cosine_mean: f64,
}

/// Demo state: one synthetic world and the last trained student.
pub struct Session {
    spec: ExperimentSpec,
    prep: Prepared,
    student: Option<StudentModel>,
}

impl Session {
    pub fn new(classes: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut spec = ExperimentSpec {
            name: "demo".into(),
            fewshot: false,
            k_neigh: 5,
            k_vlalign: 3,
            data: SyntheticDataSpec {
                teacher: SyntheticTeacherSpec {
                    num_classes: classes,
                    embed_dim: 16,
                    noise,
                    seed,
                    ..Default::default()
                },
                samples_per_class: 24,
                input_dim: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        spec.train.seed = seed;
        spec.train.batch_size = 64;
        spec.train.student.hidden = vec![32];
        spec.train.eval_every = 1;
        let prep = Prepared::new(&spec)?;
        Ok(Self { spec, prep, student: None })
    }

    pub fn train(&mut self, losses: &[String], epochs: usize, lr: f64) -> Result<TrainSummary> {
        self.spec.train.losses = losses.to_vec();
        self.spec.train.epochs = epochs;
        self.spec.train.schedule = Schedule::step_decay(lr);
        self.spec.train.validate()?;
        let out = run_prepared(&self.spec, &self.prep)?;
        let curve = out
            .log
            .epochs
            .iter()
            .map(|e| CurvePoint {
                epoch: e.epoch,
                total: e.total,
                id: e.eval.get("id").copied(),
                ood: e.eval.get("ood").copied(),
            })
            .collect();
        self.student = Some(out.student);
        Ok(TrainSummary { row: out.row, curve, metrics: out.metrics })
    }

    pub fn retrieval(&self, shots: usize, alpha: f64, beta: f64) -> Result<RetrievalSummary> {
        let student = self.student.as_ref().ok_or_else(|| Error::ConfigInvalid("train a student first".into()))?;
        let p = &self.prep;
        let draw = draw_fewshot(&p.dataset.ood_eval, p.dataset.labels.ood_labels(), shots, self.spec.train.seed)?;
        let support = p.ood_eval.by_ids(&draw.ids())?;
        let rest: Vec<String> = p.ood_eval.ids.iter().filter(|id| !draw.contains(id)).cloned().collect();
        let query = p.ood_eval.by_ids(&rest)?;
        let texts = p.ood_texts()?;
        let probs = retrieval_fewshot(student, &support, &query, &texts, RetrievalConfig { alpha, beta })?;
        let y = query.label_indices(&texts)?;
        let correct = probs.argmax_rows().iter().zip(&y).filter(|(a, b)| a == b).count();
        Ok(RetrievalSummary {
            shots,
            alpha,
            beta,
            accuracy: correct as f64 / y.len() as f64,
            zero_shot: evaluate(student, &query, &texts, None)?.accuracy,
            samples: y.len(),
        })
    }

    /// Text-feature spectrum of every label under each prompt style.
    pub fn spectrum(&self, top: usize) -> Result<Vec<StyleSpectrum>> {
        let teacher = &self.prep.teacher;
        let labels = teacher.labels();
        PromptStyle::ALL
            .iter()
            .map(|&style| {
                let texts = LabelTexts::build(teacher, &labels, style, teacher.descriptions(), None)?;
                Ok(StyleSpectrum {
                    style,
                    singular_values: text_spectrum(&texts.features, top)?,
                    cosine_mean: pairwise_cosine_mean(&texts.features)?,
                })
            })
            .collect()
    }
}

fn to_js<T: Serialize>(r: Result<T>) -> Result<String, JsValue> {
    match r {
        Ok(v) => serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())),
        Err(e) => Err(JsValue::from_str(&e.to_string())),
    }
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(classes: usize, noise: f64, seed: u64) -> Result<Demo, JsValue> {
        Session::new(classes, noise, seed).map(|inner| Demo { inner }).map_err(|e| JsValue::from_str(&e.to_string()))
    }

    /// `losses` is a comma-separated list such as `cls,im_cst`.
    pub fn train(&mut self, losses: &str, epochs: usize, lr: f64) -> Result<String, JsValue> {
        let names: Vec<String> = losses.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        to_js(self.inner.train(&names, epochs, lr))
    }

    pub fn retrieval(&self, shots: usize, alpha: f64, beta: f64) -> Result<String, JsValue> {
        to_js(self.inner.retrieval(shots, alpha, beta))
    }

    pub fn spectrum(&self, top: usize) -> Result<String, JsValue> {
        to_js(self.inner.spectrum(top))
    }
}
