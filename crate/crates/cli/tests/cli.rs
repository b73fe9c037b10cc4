use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
name = "cls+im_cst"
k_neigh = 3
k_vlalign = 2

[data]
samples_per_class = 12
input_dim = 16

[data.teacher]
num_classes = 8
embed_dim = 12
seed = 3

[train]
epochs = 12
batch_size = 32
losses = ["cls", "im_cst"]
report_last = 5

[train.student]
hidden = [24]

[train.fewshot]
epochs = 4
shots = 2
batch_size = 16
"#;

fn vlmd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlmd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("VLMD_FIXTURE")
        .env_remove("VLMD_LLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = vlmd(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Exit code and the `error` field of the machine-readable stderr line.
fn failure(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = vlmd(args, cwd);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    let code = out.status.code().unwrap();
    assert_eq!(line["exit"].as_i64(), Some(i64::from(code)));
    (code, line["error"].as_str().unwrap().to_string())
}

/// Trains once into a fresh directory with a cached teacher.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), CONFIG).unwrap();
    ok(&["cache-teacher", "--config", "small.toml", "--out", "tc"], dir.path());
    ok(&["train", "--config", "small.toml", "--teacher-cache", "tc", "--out", "run"], dir.path());
    dir
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(snapshot(&path));
        } else {
            out.insert(path.clone(), fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn metrics_on_identical_caches() {
    let dir = trained();
    let lines =
        json_lines(&ok(&["metrics", "--student", "tc/image.vlmd", "--teacher-cache", "tc", "--k", "5"], dir.path()));
    let value = |name: &str| lines.iter().find(|l| l["metric"] == name).unwrap()["values"][0].as_f64().unwrap();
    assert_eq!(value("m_rel"), 1.0);
    assert_eq!(value("m_neigh"), 1.0);
    assert_eq!(value("m_vlalign"), 0.0);
    assert_eq!(lines[0]["samples"], 96);
}

#[test]
fn retrieval_without_cache_term_matches_eval() {
    let dir = trained();
    let p = dir.path();
    let eval = json_lines(&ok(&["eval", "--run", "run", "--split", "ood", "--shots", "2", "--teacher-cache", "tc"], p));
    let retr =
        json_lines(&ok(&["retrieval", "--run", "run", "--shots", "2", "--alpha", "0", "--teacher-cache", "tc"], p));
    assert_eq!(eval[0]["accuracy"], retr[0]["accuracy"]);
    assert_eq!(eval[0]["samples"], retr[0]["samples"]);
    assert_eq!(retr[0]["samples"], 4 * 12 - 4 * 2);
}

#[test]
fn report_cells_agree_with_the_epoch_log() {
    let dir = trained();
    let p = dir.path();
    let report = ok(&["report", "--run", "run"], p);
    assert_eq!(report, ok(&["report", "--run", "run"], p));

    let log = json_lines(&fs::read_to_string(p.join("run/train.log")).unwrap());
    assert_eq!(log.len(), 12);
    let tail = &log[log.len() - 5..];
    let mean = |key: &str| 100.0 * tail.iter().map(|e| e["eval"][key].as_f64().unwrap()).sum::<f64>() / 5.0;
    let row = report.lines().find(|l| l.starts_with("cls+im_cst")).unwrap();
    let cell = row.split_whitespace().last().unwrap();
    let cells: Vec<&str> = cell.split('/').collect();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells[0], format!("{:.1}", mean("id")));
    assert_eq!(cells[1], format!("{:.1}", mean("ood")));
    assert!(cells[2].parse::<f64>().is_ok());

    let fewshot_log = fs::read_to_string(p.join("run/fewshot.log")).unwrap();
    assert_eq!(fewshot_log.lines().count(), 4);
}

#[test]
fn reading_commands_leave_inputs_untouched() {
    let dir = trained();
    let p = dir.path();
    let before = snapshot(p);
    ok(&["eval", "--run", "run", "--split", "id"], p);
    ok(&["retrieval", "--run", "run"], p);
    ok(&["fewshot", "--run", "run", "--shots", "1"], p);
    ok(
        &[
            "metrics",
            "--student",
            "run/student_ood.vlmd",
            "--teacher-cache",
            "tc",
            "--texts",
            "run/texts_ood.txt",
            "--k",
            "3",
            "--k-vlalign",
            "2",
        ],
        p,
    );
    ok(&["spectrum", "--teacher-cache", "tc", "--texts", "run/texts_id.txt", "--top", "3"], p);
    ok(&["report", "--run", "run"], p);
    assert_eq!(before, snapshot(p));
}

#[test]
fn spectrum_reports_singular_values_and_cosine_mean() {
    let dir = trained();
    let lines = json_lines(&ok(
        &["spectrum", "--teacher-cache", "tc", "--texts", "run/texts_id.txt", "--top", "3"],
        dir.path(),
    ));
    let sv = lines[0]["values"].as_array().unwrap();
    assert_eq!(sv.len(), 3);
    assert!(sv.windows(2).all(|w| w[0].as_f64() >= w[1].as_f64()));
    assert_eq!(lines[1]["metric"], "cosine_mean");
    assert_eq!(lines[1]["samples"], 4);
}

#[test]
fn enrich_replays_fixture_and_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("labels.txt"), "lotus\nrose\n").unwrap();
    let style = vlmd::enrich::PromptStyle::Original;
    let fixture: String = ["lotus", "rose"]
        .iter()
        .map(|l| {
            serde_json::to_string(&vlmd::enrich::FixtureRecord {
                request: style.instruction(l).unwrap(),
                response: format!("{l} petals"),
            })
            .unwrap()
                + "\n"
        })
        .collect();
    fs::write(p.join("llm.jsonl"), fixture).unwrap();
    let args =
        ["enrich", "--labels", "labels.txt", "--style", "original", "--out", "desc.jsonl", "--fixture", "llm.jsonl"];
    let first = json_lines(&ok(&args, p));
    assert_eq!(first[0]["text"], "a photo of lotus, lotus petals");
    let cache = fs::read(p.join("desc.jsonl")).unwrap();
    assert_eq!(ok(&args, p), first.iter().map(|v| v.to_string() + "\n").collect::<String>());
    assert_eq!(fs::read(p.join("desc.jsonl")).unwrap(), cache);

    let plain = json_lines(&ok(&["enrich", "--labels", "labels.txt", "--style", "plain", "--out", "plain.jsonl"], p));
    assert_eq!(plain[1]["text"], "A photo of a rose");
}

#[test]
fn caption_fills_missing_captions_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("samples.tsv"), "s1\timg/1.jpg\tcar\ns2\timg/2.jpg\tcar\n").unwrap();
    let records = [("img/1.jpg", "a white car is parked in a field"), ("img/2.jpg", "a red car")]
        .iter()
        .map(|(req, resp)| format!("{{\"request\":\"{req}\",\"response\":\"{resp}\"}}\n"))
        .collect::<String>();
    fs::write(p.join("cap.jsonl"), records).unwrap();
    let args = ["caption", "--samples", "samples.tsv", "--out", "captions.jsonl", "--fixture", "cap.jsonl"];
    assert_eq!(json_lines(&ok(&args, p))[0]["calls"], 2);
    assert_eq!(json_lines(&ok(&args, p))[0]["calls"], 0);
    let set = vlmd::enrich::CaptionSet::load(p.join("captions.jsonl")).unwrap();
    assert_eq!(set.get("s1"), Some("a white car is parked in a field"));
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = trained();
    let p = dir.path();

    fs::write(p.join("bad.toml"), "not_a_key = 1\n").unwrap();
    assert_eq!(failure(&["train", "--config", "bad.toml", "--out", "x"], p), (3, "ConfigInvalid".into()));
    assert!(!p.join("x").exists());

    assert_eq!(failure(&["report", "--run", "absent"], p), (4, "InputMissing".into()));

    fs::create_dir(p.join("broken")).unwrap();
    let mut image = fs::read(p.join("tc/image.vlmd")).unwrap();
    image[0] = b'X';
    fs::write(p.join("broken/image.vlmd"), image).unwrap();
    fs::copy(p.join("tc/text.vlmd"), p.join("broken/text.vlmd")).unwrap();
    assert_eq!(
        failure(&["metrics", "--student", "tc/image.vlmd", "--teacher-cache", "broken"], p),
        (5, "CacheCorrupt".into())
    );

    fs::write(p.join("labels.txt"), "lotus\n").unwrap();
    assert_eq!(failure(&["enrich", "--labels", "labels.txt", "--out", "d.jsonl"], p), (6, "ClientUnavailable".into()));

    let diverging =
        CONFIG.replace("report_last = 5", "report_last = 5\nschedule = { kind = \"constant\", lr = 1e200 }");
    fs::write(p.join("diverge.toml"), diverging).unwrap();
    assert_eq!(failure(&["train", "--config", "diverge.toml", "--out", "dv"], p), (7, "DivergedLoss".into()));
    assert!(p.join("dv/diverged.json").exists());

    assert_eq!(failure(&["train", "--config", "small.toml", "--out", "run"], p), (3, "ConfigInvalid".into()));
    assert_eq!(failure(&["train", "--shots", "3"], p), (2, "Usage".into()));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let spec = vlmd::experiment::ExperimentSpec::from_toml(&fs::read_to_string(&path).unwrap());
        assert!(spec.is_ok(), "{}: {spec:?}", path.display());
        seen += 1;
    }
    assert!(seen >= 2);
}
