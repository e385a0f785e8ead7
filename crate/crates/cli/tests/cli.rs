use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fewshot_crf::conll::write_conll;
use fewshot_crf::sampler::FewShotDataset;
use fewshot_crf::synthetic::{generate, SyntheticConfig};
use fewshot_crf::trainer::Checkpoint;
use tempfile::TempDir;

const DIM: usize = 16;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Four synthetic domains written as CoNLL files plus their word vectors.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let corpus = generate(&SyntheticConfig {
            domains: 4,
            labels_per_domain: 3,
            sentences_per_domain: 40,
            dim: DIM,
            seed: 3,
            ..SyntheticConfig::default()
        });
        let corpus_dir = dir.path().join("corpus");
        fs::create_dir(&corpus_dir).unwrap();
        let mut words = BTreeSet::new();
        for d in &corpus.domains {
            let file = fs::File::create(corpus_dir.join(format!("{}.conll", d.name))).unwrap();
            write_conll(file, &d.sentences).unwrap();
            words.extend(d.sentences.iter().flat_map(|s| s.tokens().iter().cloned()));
        }
        let lexicon: String = words
            .iter()
            .map(|w| {
                let v = corpus.lexicon.get(w).unwrap();
                let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                format!("{w} {}\n", vals.join(" "))
            })
            .collect();
        fs::write(dir.path().join("vectors.txt"), lexicon).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write_config(&self, name: &str, extra: &str) -> PathBuf {
        let root = self.dir.path().display();
        let text = format!(
            r#"
seed = 5

[paths]
corpus_dir = "{root}/corpus"
lexicon = "{root}/vectors.txt"
output_dir = "{root}/out"

[split]
target = "dom3"
dev = "dom2"
support_sets = 3
queries = 12

[sampler]
shot = 1

[embedding]
dim = {DIM}
mode = "pairwise"
source = "toy_attention"
attention_sharpness = 1.0
attention_mix = 2.0

[train]
learning_rate = 0.05
max_epochs = 4
early_stop_patience_epochs = 10
{extra}
"#
        );
        let path = self.path(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fewshot-crf"))
            .args(args)
            .env_remove("FEWSHOT_CORPUS_DIR")
            .env_remove("FEWSHOT_OUTPUT_DIR")
            .env_remove("FEWSHOT_CHECKPOINT")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn config_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn domains_of(path: &Path) -> BTreeSet<String> {
    FewShotDataset::read_jsonl_file(path)
        .unwrap()
        .episodes
        .iter()
        .map(|e| e.domain.clone())
        .collect()
}

#[test]
fn sample_writes_split_files_deterministically() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "");
    ws.ok(&["sample", "--config", config_arg(&cfg)]);
    let dir = ws.path("out/episodes");
    let train = domains_of(&dir.join("train.jsonl"));
    assert_eq!(train, ["dom0", "dom1"].map(String::from).into());
    assert_eq!(domains_of(&dir.join("dev.jsonl")), ["dom2".to_string()].into());
    assert_eq!(domains_of(&dir.join("test.jsonl")), ["dom3".to_string()].into());
    let test = FewShotDataset::read_jsonl_file(&dir.join("test.jsonl")).unwrap();
    assert_eq!(test.len(), 12);
    assert_eq!(test.queries_per_support, 4);

    let first: Vec<Vec<u8>> = ["train", "dev", "test"]
        .iter()
        .map(|s| fs::read(dir.join(format!("{s}.jsonl"))).unwrap())
        .collect();
    ws.ok(&["sample", "--config", config_arg(&cfg)]);
    for (s, bytes) in ["train", "dev", "test"].iter().zip(first) {
        assert_eq!(fs::read(dir.join(format!("{s}.jsonl"))).unwrap(), bytes, "{s} changed");
    }
}

#[test]
fn missing_corpus_exits_with_config_code_and_names_path() {
    let ws = Workspace::new();
    fs::rename(ws.path("corpus"), ws.path("elsewhere")).unwrap();
    let cfg = ws.write_config("run.toml", "");
    let out = ws.run(&["sample", "--config", config_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&ws.path("corpus").display().to_string()), "{err}");
}

#[test]
fn usage_and_unknown_keys_exit_1() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["train"]).status.code(), Some(1));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(1));
    let cfg = ws.write_config("run.toml", "learning_rat = 3.0");
    assert_eq!(ws.run(&["sample", "--config", config_arg(&cfg)]).status.code(), Some(1));
    assert!(ws.run(&["--help"]).status.success());
}

#[test]
fn unknown_domain_is_a_config_error() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("target = \"dom3\"", "target = \"nope\"");
    fs::write(&cfg, text).unwrap();
    let out = ws.run(&["sample", "--config", config_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn corrupt_episode_file_exits_2() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "");
    ws.ok(&["sample", "--config", config_arg(&cfg)]);
    fs::write(ws.path("out/episodes/train.jsonl"), "{not json\n").unwrap();
    let out = ws.run(&["train", "--config", config_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn overflowing_vectors_exit_3() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "");
    ws.ok(&["sample", "--config", config_arg(&cfg)]);
    // Dot products of these vectors overflow to infinity.
    let huge = fs::read_to_string(ws.path("vectors.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let word = l.split_whitespace().next().unwrap();
            format!("{word}{}\n", " 1e200".repeat(DIM))
        })
        .collect::<String>();
    fs::write(ws.path("vectors.txt"), huge).unwrap();
    let out = ws.run(&["train", "--config", config_arg(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_eval_analyze_pipeline() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "");
    let c = config_arg(&cfg);
    ws.ok(&["sample", "--config", c]);
    ws.ok(&["--workers", "2", "train", "--config", c]);

    let ckpt = Checkpoint::load(&ws.path("out/checkpoint.json")).unwrap();
    assert_eq!(ckpt.history.len(), 4);
    assert!(ckpt.model.table.to_vec().iter().any(|&v| v != 0.0));
    let csv = fs::read_to_string(ws.path("out/loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,dev_loss"));
    assert_eq!(csv.lines().count(), 5);

    ws.ok(&["eval", "--config", c, "--decoder", "rule", "--analysis", "bigrams"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("out/report_rule.json")).unwrap()).unwrap();
    assert_eq!(report["decoder"], "rule");
    assert_eq!(report["episodes"].as_array().unwrap().len(), 3);
    let mean = report["mean_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert!(report["bigrams"].is_array());
    assert!(ws.path("out/report_rule.txt").exists());
    let dump = fs::read_to_string(ws.path("out/predictions_rule.conll")).unwrap();
    assert!(dump
        .lines()
        .filter(|l| !l.is_empty())
        .all(|l| l.split(' ').count() == 3));

    ws.ok(&["eval", "--config", c, "--pooled"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("out/report_viterbi.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "pooled");
    assert!(report.get("bigrams").is_none());

    let out = ws.ok(&["analyze", "--config", c]);
    let summary = String::from_utf8_lossy(&out.stdout);
    for d in ["viterbi", "rule", "argmax"] {
        assert!(summary.contains(d), "{summary}");
        assert!(ws.path(&format!("out/report_{d}.json")).exists());
    }
    assert!(ws.path("out/decoders.tsv").exists());
}

#[test]
fn no_transition_flag_keeps_table_zero_and_scorer_flag_changes_model() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "max_epochs = 2");
    let text = fs::read_to_string(&cfg).unwrap().replace("max_epochs = 4\n", "");
    fs::write(&cfg, text).unwrap();
    let c = config_arg(&cfg);
    ws.ok(&["sample", "--config", c]);

    ws.ok(&["train", "--config", c, "--no-transition"]);
    let frozen = Checkpoint::load(&ws.path("out/checkpoint.json")).unwrap();
    assert!(frozen.model.table.to_vec().iter().all(|&v| v == 0.0));

    ws.ok(&["train", "--config", c, "--scorer", "nmn"]);
    let nmn = Checkpoint::load(&ws.path("out/checkpoint.json")).unwrap();
    ws.ok(&["train", "--config", c, "--scorer", "mn"]);
    let mn = Checkpoint::load(&ws.path("out/checkpoint.json")).unwrap();
    assert_ne!(nmn.model.lambda, mn.model.lambda);
    assert_ne!(nmn.model.table, mn.model.table);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = Workspace::new();
    let full = ws.write_config("full.toml", "");
    ws.ok(&["sample", "--config", config_arg(&full)]);
    ws.ok(&["train", "--config", config_arg(&full)]);
    let uninterrupted = Checkpoint::load(&ws.path("out/checkpoint.json")).unwrap();

    let text = fs::read_to_string(&full).unwrap();
    let short = ws.path("short.toml");
    fs::write(
        &short,
        text.replace("max_epochs = 4", "max_epochs = 2").replace(
            "[paths]\n",
            &format!("[paths]\ncheckpoint = \"{}\"\n", ws.path("partial.json").display()),
        ),
    )
    .unwrap();
    ws.ok(&["train", "--config", config_arg(&short)]);
    let partial = ws.path("partial.json");
    assert_eq!(Checkpoint::load(&partial).unwrap().history.len(), 2);

    ws.ok(&[
        "train",
        "--config",
        config_arg(&full),
        "--resume",
        partial.to_str().unwrap(),
    ]);
    let resumed = Checkpoint::load(&ws.path("out/checkpoint.json")).unwrap();
    assert_eq!(resumed.history, uninterrupted.history);
    assert_eq!(resumed.model, uninterrupted.model);
}

#[test]
fn output_dir_env_override() {
    let ws = Workspace::new();
    let cfg = ws.write_config("run.toml", "");
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot-crf"))
        .args(["sample", "--config", config_arg(&cfg)])
        .env("FEWSHOT_OUTPUT_DIR", ws.path("elsewhere"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path("elsewhere/episodes/test.jsonl").exists());
    assert!(!ws.path("out/episodes").exists());
}
