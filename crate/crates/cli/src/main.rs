//! `vlmd`: command-line front end for distillation runs, feature caches and
//! alignment diagnostics.

mod client;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vlmd::dataset::{draw_fewshot, read_manifest};
use vlmd::enrich::{
    build_label_text, generate_captions, generate_descriptions, CaptionSet, DescriptionCache, PromptStyle,
};
use vlmd::experiment::{run_prepared, ExperimentSpec, Prepared};
use vlmd::metrics::{metric_neigh, metric_rel, metric_vlalign, pairwise_cosine_mean, text_spectrum, MetricReport};
use vlmd::persist::{cache_read, cache_write, render_report, write_atomic, CacheMeta, RunManifest};
use vlmd::teacher::{cached_teacher, export_teacher, CachedTeacher, TEXT_CACHE_FILE};
use vlmd::trainer::{evaluate, fewshot_finetune, retrieval_fewshot, DistillSet, EvalTarget, RetrievalConfig};
use vlmd::{Error, FeatureKind, FeatureMatrix, StudentModel, TeacherProvider};

const RUN_FILE: &str = "run.json";
const STUDENT_FILE: &str = "student.json";

#[derive(Parser)]
#[command(name = "vlmd", version, about = "Vision-language knowledge distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate label descriptions with an LLM client and print label texts.
    Enrich(EnrichArgs),
    /// Caption every sample of a manifest.
    Caption(CaptionArgs),
    /// Export the synthetic teacher of a config as a feature cache.
    CacheTeacher(CacheTeacherArgs),
    /// Distill a student and write a run directory.
    Train(TrainArgs),
    /// Few-shot finetune a trained student on OOD support samples.
    Fewshot(FewshotArgs),
    /// Training-free few-shot classification with a feature cache.
    Retrieval(RetrievalArgs),
    /// Zero-shot accuracy of a trained student.
    Eval(EvalArgs),
    /// Alignment metrics between a student cache and a teacher cache.
    Metrics(MetricsArgs),
    /// Singular values and mean pairwise cosine of text features.
    Spectrum(SpectrumArgs),
    /// Render the result table of a run.
    Report(ReportArgs),
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, env = "VLMD_FIXTURE")]
    fixture: Option<PathBuf>,
    #[arg(long, env = "VLMD_LLM_ENDPOINT")]
    endpoint: Option<String>,
}

#[derive(Args)]
struct EnrichArgs {
    /// One label per line.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "original")]
    style: PromptStyle,
    /// Description cache (JSON lines); created if absent, only appended to.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct CaptionArgs {
    /// Tab-separated `id path label [caption]` lines.
    #[arg(long)]
    samples: PathBuf,
    /// Caption set; existing captions are kept.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    client: ClientArgs,
}

#[derive(Args)]
struct SpecArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    style: Option<PromptStyle>,
}

#[derive(Args)]
struct CacheTeacherArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Directory with image.vlmd and text.vlmd to read teacher features from.
    #[arg(long)]
    teacher_cache: Option<PathBuf>,
    /// Caption set for the training split.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    teacher_cache: Option<PathBuf>,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    shots: Option<usize>,
    /// Where to write the finetuned student.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrievalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// One of train, id, ood.
    #[arg(long, default_value = "ood")]
    split: String,
    /// Leave out the few-shot support set drawn for this many shots.
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Student feature cache.
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teacher_cache: PathBuf,
    /// Restrict text features to these texts, one per line.
    #[arg(long)]
    texts: Option<PathBuf>,
    /// Neighbourhood size for the neighbour-overlap metric.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Number of nearest texts ranked by the alignment metric.
    #[arg(long, default_value_t = 5)]
    k_vlalign: usize,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    teacher_cache: PathBuf,
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", json!({ "error": "Usage", "exit": 2, "message": e.kind().to_string() }));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, name) = classify(&e);
            eprintln!("{}", json!({ "error": name, "exit": code, "message": format!("{e:#}") }));
            ExitCode::from(code)
        }
    }
}

/// Exit code and error name for a failure.
fn classify(e: &anyhow::Error) -> (u8, String) {
    let Some(err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return (1, "Internal".into());
    };
    let name = format!("{err:?}");
    let name = name.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string();
    let code = match err {
        Error::ConfigInvalid(_) | Error::BadSpec(_) => 3,
        Error::InputMissing(_) => 4,
        Error::CacheCorrupt(_) | Error::VersionUnsupported(_) => 5,
        Error::ClientUnavailable(_) | Error::EmptyGeneration(_) => 6,
        Error::DivergedLoss { .. } => 7,
        _ => 1,
    };
    (code, name)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Enrich(a) => enrich(a),
        Command::Caption(a) => caption(a),
        Command::CacheTeacher(a) => cache_teacher(a),
        Command::Train(a) => train(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Retrieval(a) => retrieval(a),
        Command::Eval(a) => eval(a),
        Command::Metrics(a) => metrics(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Report(a) => report(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|_| Error::InputMissing(path.to_path_buf()).into())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InputMissing(path.to_path_buf()).into())
    }
}

fn load_spec(args: &SpecArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::from_toml(&read_text(path)?)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec = spec.with_seed(seed);
    }
    if let Some(style) = args.style {
        spec.style = style;
    }
    Ok(spec)
}

fn open_teacher(dir: Option<&Path>) -> Result<Option<CachedTeacher>> {
    dir.map(|d| {
        require_dir(d)?;
        Ok(cached_teacher(d)?)
    })
    .transpose()
}

fn enrich(a: EnrichArgs) -> Result<()> {
    let labels = read_lines(&a.labels)?;
    let mut cache = DescriptionCache::open(&a.out)?;
    let generator = if a.style == PromptStyle::Plain {
        None
    } else {
        let client = client::open(a.client.fixture.as_deref(), a.client.endpoint.as_deref(), "prompt")?;
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        generate_descriptions(&labels, a.style, client.as_ref(), &mut cache)?;
        Some(client.id().to_string())
    };
    for label in &labels {
        let text = build_label_text(label, a.style, &cache, generator.as_deref())?;
        println!("{}", json!({ "label": label, "style": a.style, "text": text }));
    }
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<()> {
    let samples = read_manifest(&a.samples)?;
    let mut set = if a.out.exists() { CaptionSet::load(&a.out)? } else { CaptionSet::default() };
    let client = client::open(a.client.fixture.as_deref(), a.client.endpoint.as_deref(), "image")?;
    let pairs: Vec<(String, String)> =
        samples.iter().map(|s| (s.id.clone(), s.path.clone().unwrap_or_else(|| s.id.clone()))).collect();
    let calls = generate_captions(&pairs, client.as_ref(), &mut set)?;
    set.save(&a.out)?;
    println!("{}", json!({ "samples": samples.len(), "calls": calls, "captions": set.len() }));
    Ok(())
}

fn cache_teacher(a: CacheTeacherArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let prep = Prepared::new(&spec)?;
    export_teacher(&prep.teacher, &prep.teacher.sample_ids(), &prep.teacher.known_texts(), &a.out)?;
    println!(
        "{}",
        json!({
            "generator": prep.generator,
            "samples": prep.teacher.sample_ids().len(),
            "texts": prep.teacher.known_texts().len(),
            "dim": prep.teacher.embed_dim(),
        })
    );
    Ok(())
}

fn student_cache(student: &StudentModel, data: &DistillSet, path: &Path, generator: &str) -> Result<()> {
    cache_write(path, &data.student_features(student)?, &CacheMeta::new(generator))?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let teacher = open_teacher(a.teacher_cache.as_deref())?;
    let captions = a.captions.as_deref().map(CaptionSet::load).transpose()?;
    if a.out.exists() && a.out.join(RUN_FILE).exists() {
        return Err(Error::ConfigInvalid(format!("{} already holds a run", a.out.display())).into());
    }
    let prep = Prepared::with_provider(&spec, teacher.as_ref().map(|t| t as &dyn TeacherProvider), captions.as_ref())?;

    fs::create_dir_all(&a.out)?;
    let mut run_spec = spec.clone();
    run_spec.train.dump_dir.get_or_insert_with(|| a.out.clone());
    let out = run_prepared(&run_spec, &prep)?;

    let mut manifest =
        RunManifest::new(serde_json::to_value(&spec)?, vec![spec.train.seed], out.teacher_generator.clone());
    write_atomic(&a.out.join("train.log"), out.log.to_lines().as_bytes())?;
    manifest.epoch_logs.push("train.log".into());
    if let Some(log) = &out.fewshot_log {
        write_atomic(&a.out.join("fewshot.log"), log.to_lines().as_bytes())?;
        manifest.epoch_logs.push("fewshot.log".into());
    }
    let metric_lines: String = out.metrics.iter().map(|m| m.to_line() + "\n").collect();
    write_atomic(&a.out.join("metrics.jsonl"), metric_lines.as_bytes())?;
    for m in &out.metrics {
        let k = m.params.get("k").map_or(String::new(), |k| format!("@{k}"));
        manifest.extra.insert(format!("{}{k}.{}", m.metric, m.dataset), m.values[0]);
    }
    student_cache(&out.student, &prep.train, &a.out.join("student_train.vlmd"), &out.teacher_generator)?;
    student_cache(&out.student, &prep.ood_eval, &a.out.join("student_ood.vlmd"), &out.teacher_generator)?;
    write_atomic(&a.out.join("texts_id.txt"), prep.id_texts()?.texts.join("\n").as_bytes())?;
    write_atomic(&a.out.join("texts_ood.txt"), prep.ood_texts()?.texts.join("\n").as_bytes())?;
    write_atomic(&a.out.join(STUDENT_FILE), &serde_json::to_vec(&out.student)?)?;
    manifest.results.push(out.row);
    manifest.save(a.out.join(RUN_FILE))?;
    print!("{}", render_report(&manifest));
    Ok(())
}

/// A finished run loaded back from its directory.
struct LoadedRun {
    spec: ExperimentSpec,
    prep: Prepared,
    student: StudentModel,
}

fn load_run(a: &RunArgs) -> Result<LoadedRun> {
    require_dir(&a.run)?;
    let manifest = RunManifest::load(a.run.join(RUN_FILE))?;
    let spec: ExperimentSpec = serde_json::from_value(manifest.config)
        .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", a.run.join(RUN_FILE).display())))?;
    let student_path = a.run.join(STUDENT_FILE);
    let student: StudentModel = serde_json::from_str(&read_text(&student_path)?)
        .with_context(|| format!("reading {}", student_path.display()))?;
    let teacher = open_teacher(a.teacher_cache.as_deref())?;
    let prep = Prepared::with_provider(&spec, teacher.as_ref().map(|t| t as &dyn TeacherProvider), None)?;
    Ok(LoadedRun { spec, prep, student })
}

/// OOD support set for `shots` and the remaining OOD queries.
fn support_and_query(run: &LoadedRun, shots: usize) -> Result<(DistillSet, DistillSet)> {
    let p = &run.prep;
    let draw = draw_fewshot(&p.dataset.ood_eval, p.dataset.labels.ood_labels(), shots, run.spec.train.seed)?;
    let support = p.ood_eval.by_ids(&draw.ids())?;
    let rest: Vec<String> = p.ood_eval.ids.iter().filter(|id| !draw.contains(id)).cloned().collect();
    Ok((support, p.ood_eval.by_ids(&rest)?))
}

fn fewshot(a: FewshotArgs) -> Result<()> {
    let mut run = load_run(&a.run)?;
    if let Some(out) = &a.out {
        if out.join(STUDENT_FILE).exists() {
            return Err(Error::ConfigInvalid(format!("{} already holds a student", out.display())).into());
        }
    }
    if let Some(shots) = a.shots {
        run.spec.train.fewshot.shots = shots;
    }
    let shots = run.spec.train.fewshot.shots;
    let (support, query) = support_and_query(&run, shots)?;
    let p = &run.prep;
    let id_texts = p.id_texts()?;
    let ood_texts = p.ood_texts()?;
    let evals = [
        EvalTarget { name: "id", data: &p.id_eval, texts: &id_texts },
        EvalTarget { name: "ood", data: &query, texts: &ood_texts },
    ];
    let mut tuned = run.student.clone();
    let out = fewshot_finetune(&mut tuned, &p.train, &support, &p.texts, &evals, &run.spec.train)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(STUDENT_FILE), &serde_json::to_vec(&tuned)?)?;
        write_atomic(&dir.join("fewshot.log"), out.log.to_lines().as_bytes())?;
    }
    println!(
        "{}",
        json!({
            "shots": shots,
            "support": support.len(),
            "queries": query.len(),
            "epochs": out.log.epochs.len(),
            "before": out.before,
            "after": out.after,
        })
    );
    Ok(())
}

fn retrieval(a: RetrievalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let defaults = run.spec.train.retrieval;
    let cfg = RetrievalConfig { alpha: a.alpha.unwrap_or(defaults.alpha), beta: a.beta.unwrap_or(defaults.beta) };
    cfg.validate()?;
    let shots = a.shots.unwrap_or(run.spec.train.fewshot.shots);
    let (support, query) = support_and_query(&run, shots)?;
    let texts = run.prep.ood_texts()?;
    let probs = retrieval_fewshot(&run.student, &support, &query, &texts, cfg)?;
    let y = query.label_indices(&texts)?;
    let pred = probs.argmax_rows();
    let correct = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    println!(
        "{}",
        json!({
            "split": "ood",
            "shots": shots,
            "alpha": cfg.alpha,
            "beta": cfg.beta,
            "accuracy": correct as f64 / y.len().max(1) as f64,
            "samples": y.len(),
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let p = &run.prep;
    let held_out;
    let (data, texts) = match a.split.as_str() {
        "train" => (&p.train, p.id_texts()?),
        "id" => (&p.id_eval, p.id_texts()?),
        "ood" => match a.shots {
            Some(shots) => {
                held_out = support_and_query(&run, shots)?.1;
                (&held_out, p.ood_texts()?)
            }
            None => (&p.ood_eval, p.ood_texts()?),
        },
        other => return Err(Error::UnknownSplit(other.to_string()).into()),
    };
    let report = evaluate(&run.student, data, &texts, None)?;
    println!("{}", json!({ "split": a.split, "accuracy": report.accuracy, "samples": report.samples }));
    Ok(())
}

/// Text features of the cache, optionally restricted to `texts` in order.
fn text_features(dir: &Path, texts: Option<&Path>) -> Result<FeatureMatrix> {
    require_dir(dir)?;
    let (m, meta) = cache_read(dir.join(TEXT_CACHE_FILE))?;
    let Some(path) = texts else {
        return Ok(m.relabel(meta.texts)?);
    };
    let wanted = read_lines(path)?;
    let index: BTreeMap<&str, usize> = meta.texts.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let rows = wanted
        .iter()
        .map(|t| index.get(t.as_str()).copied().ok_or_else(|| Error::MissingText(t.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(m.select(&rows)?.relabel(wanted)?)
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let (student, _) = cache_read(&a.student)?;
    let student = student.with_kind(FeatureKind::StudentVisual);
    require_dir(&a.teacher_cache)?;
    let teacher = cached_teacher(&a.teacher_cache)?.image_features(student.ids())?;
    let text = text_features(&a.teacher_cache, a.texts.as_deref())?;
    let n = student.rows();
    let dataset = a.student.file_stem().and_then(|s| s.to_str()).unwrap_or("student");
    let reports = [
        MetricReport::new("m_rel", dataset, vec![metric_rel(&student, &teacher)?], n),
        MetricReport::new("m_neigh", dataset, vec![metric_neigh(&student, &teacher, a.k)?], n)
            .with_param("k", a.k as f64),
        MetricReport::new("m_vlalign", dataset, vec![metric_vlalign(&student, &teacher, &text, a.k_vlalign)?], n)
            .with_param("k", a.k_vlalign as f64),
    ];
    for r in &reports {
        println!("{}", r.to_line());
    }
    Ok(())
}

fn spectrum(a: SpectrumArgs) -> Result<()> {
    let text = text_features(&a.teacher_cache, a.texts.as_deref())?;
    let n = text.rows();
    let values = text_spectrum(&text, a.top)?;
    println!("{}", MetricReport::new("singular_values", "text", values, n).to_line());
    println!("{}", MetricReport::new("cosine_mean", "text", vec![pairwise_cosine_mean(&text)?], n).to_line());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    require_dir(&a.run)?;
    print!("{}", render_report(&RunManifest::load(a.run.join(RUN_FILE))?));
    Ok(())
}
