use std::fs;
use std::path::Path;

use kgdial::cli::run;
use kgdial::corpus::{write_corpus, Corpus, Split};
use kgdial::metrics::MetricsReport;
use kgdial::synthetic::{toy_corpus, ToySpec};
use serde_json::json;

fn setup(dir: &Path) -> std::path::PathBuf {
    let train = toy_corpus(ToySpec {
        examples: 6,
        knowledge_per_example: 3,
        seed: 5,
    });
    write_corpus(dir.join("train.jsonl"), &train).unwrap();
    write_corpus(dir.join("valid.jsonl"), &Corpus::new(Split::Valid, train.examples[..3].to_vec())).unwrap();
    write_corpus(dir.join("test.jsonl"), &Corpus::new(Split::Test, train.examples[3..].to_vec())).unwrap();
    fs::write(dir.join("vectors.txt"), "otters 1 0\neat 0 1\nevery 1 1\n").unwrap();
    let config = json!({
        "paths": {
            "train": dir.join("train.jsonl"),
            "valid": dir.join("valid.jsonl"),
            "eval": dir.join("test.jsonl"),
            "embeddings": dir.join("vectors.txt"),
            "runs_root": dir.join("runs"),
        },
        "model": {
            "encoder": {"width": 16, "heads": 2, "layers": 1, "ff_width": 32, "budget": 64},
            "selector": {"hidden": 16, "layers": 1},
            "generator": {"width": 16, "heads": 2, "layers": 1, "ff_width": 32, "capacity": 128},
            "response_budget": 16
        },
        "train": {"warmup_steps": 3, "warmup_batch": 4, "joint_batch": 3, "max_steps": 4,
                  "validation_every": 2, "lr_selector": 1e-3, "lr_generator": 1e-3, "lambda": 0.01},
        "vocab_max_size": 500
    });
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn kg(args: &[&str]) -> i32 {
    run(std::iter::once("kgdial").chain(args.iter().copied()))
}

#[test]
fn subcommands_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    for cmd in ["pseudo", "warmup", "train"] {
        assert_eq!(kg(&[cmd, "--config", cfg]), 0, "{cmd}");
    }
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1, "all commands share one run directory");
    let run_dir = runs.into_iter().next().unwrap().unwrap().path();
    for file in ["config.json", "vocab.json", "cache/pseudo_train.jsonl", "warmup_log.jsonl", "train_log.jsonl"] {
        assert!(run_dir.join(file).exists(), "{file}");
    }
    assert!(run_dir.join("checkpoints/latest/manifest.json").exists());
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "L_K", "L_G", "p", "mean_reward", "validation_ppl"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    // training further resumes at step 5
    assert_eq!(kg(&["train", "--config", cfg, "--set", "train.max_steps=5"]), 0);
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 5);

    assert_eq!(kg(&["select", "--config", cfg]), 0);
    let sel = fs::read_to_string(run_dir.join("selections.jsonl")).unwrap();
    assert_eq!(sel.lines().count(), 3);
    let rec: serde_json::Value = serde_json::from_str(sel.lines().next().unwrap()).unwrap();
    for key in ["example_id", "indices", "step_log_probs", "terminated_by"] {
        assert!(rec.get(key).is_some(), "{key}");
    }

    assert_eq!(kg(&["generate", "--config", cfg]), 0);
    let gen = fs::read_to_string(run_dir.join("generations.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(gen.lines().next().unwrap()).unwrap();
    for key in ["example_id", "text", "token_count", "mean_nll"] {
        assert!(rec.get(key).is_some(), "{key}");
    }

    let report_path = dir.path().join("report.json");
    let set_report = format!("paths.report={}", report_path.display());
    assert_eq!(kg(&["evaluate", "--config", cfg, "--set", &set_report]), 0);
    let first = fs::read_to_string(&report_path).unwrap();
    let report: MetricsReport = serde_json::from_str(&first).unwrap();
    assert_eq!(report.n_examples, 3);
    assert!(report.average.is_some() && report.selection_accuracy.is_some());
    assert_eq!(kg(&["evaluate", "--config", cfg, "--set", &set_report]), 0);
    assert_eq!(fs::read_to_string(&report_path).unwrap(), first, "evaluate is repeatable");

    assert_eq!(kg(&["sweep", "--config", cfg, "--variable", "t_max", "--values", "1,2,3"]), 0);
    let table = fs::read_to_string(run_dir.join("sweep_t_max.jsonl")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(
        kg(&["sweep", "--config", cfg, "--variable", "trunc_budget", "--values", "64,96,128"]),
        0
    );
    assert_eq!(fs::read_to_string(run_dir.join("sweep_trunc_budget.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(kg(&["frobnicate"]), 2);
    assert_eq!(kg(&[]), 2);
    assert_eq!(kg(&["evaluate", "--set", "train.no_such_field=1"]), 2);
    assert_eq!(kg(&["evaluate", "--set", "train.t_max=0"]), 2);
    assert_eq!(kg(&["sweep", "--variable", "depth", "--values", "1"]), 2);
    assert_eq!(kg(&["--help"]), 0);
}

#[test]
fn missing_corpus_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    fs::remove_file(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(kg(&["pseudo", "--config", cfg.to_str().unwrap()]), 1);
    let missing = dir.path().join("nowhere.jsonl");
    let set = format!("paths.eval={}", missing.display());
    assert_eq!(kg(&["evaluate", "--config", cfg.to_str().unwrap(), "--set", &set]), 1);
}

#[test]
fn preprocess_converts_wizard_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("wow.json");
    let data = json!([{
        "chosen_topic": "Tea",
        "chosen_topic_passage": ["Tea is a drink.", "Tea grows on bushes."],
        "dialog": [
            {"speaker": "1_Apprentice", "text": "I like tea."},
            {"speaker": "0_Wizard", "text": "It is a drink.", "checked_sentence": {"x": "Tea is a drink."}}
        ]
    }]);
    fs::write(&input, data.to_string()).unwrap();
    let output = dir.path().join("out/train.jsonl");
    let code = kg(&[
        "preprocess",
        "--format",
        "wizard",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let corpus = kgdial::corpus::load_corpus(&output, Split::Train).unwrap();
    assert_eq!(corpus.len(), 1);
    assert_eq!(corpus.examples[0].gold_knowledge_index, Some(0));
}
