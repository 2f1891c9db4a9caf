//! Drive the command-line pipeline from code: pseudo, warmup, train,
//! select, generate, evaluate and sweep in one run directory.

use std::fs;

use kgdial::cli::run;
use kgdial::corpus::{write_corpus, Corpus, Split};
use kgdial::synthetic::{toy_corpus, ToySpec};
use serde_json::json;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let corpus = toy_corpus(ToySpec::default());
    write_corpus(dir.path().join("train.jsonl"), &corpus)?;
    write_corpus(
        dir.path().join("test.jsonl"),
        &Corpus::new(Split::Test, corpus.examples[..4].to_vec()),
    )?;
    let config = json!({
        "paths": {
            "train": dir.path().join("train.jsonl"),
            "eval": dir.path().join("test.jsonl"),
            "runs_root": dir.path().join("runs"),
        },
        "model": {
            "encoder": {"width": 32, "heads": 2, "layers": 1, "ff_width": 64, "budget": 64},
            "selector": {"hidden": 32, "layers": 1},
            "generator": {"width": 32, "heads": 2, "layers": 1, "ff_width": 64, "capacity": 128},
            "response_budget": 32
        },
        "train": {"warmup_steps": 40, "warmup_batch": 8, "joint_batch": 4, "max_steps": 20,
                  "lr_selector": 1e-3, "lr_generator": 1e-3, "lambda": 1e-2}
    });
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;
    let cfg = config_path.to_str().unwrap();

    let steps: [&[&str]; 7] = [
        &["pseudo", "--config", cfg],
        &["warmup", "--config", cfg],
        &["train", "--config", cfg],
        &["select", "--config", cfg],
        &["generate", "--config", cfg],
        &["evaluate", "--config", cfg, "--set", "eval.t_max=2"],
        &["sweep", "--config", cfg, "--variable", "trunc_budget", "--values", "64,96,128"],
    ];
    for args in steps {
        println!("$ kgdial {}", args.join(" "));
        let code = run(std::iter::once("kgdial").chain(args.iter().copied()));
        anyhow::ensure!(code == 0, "exit code {code}");
    }
    println!("$ kgdial frobnicate");
    println!("exit code {}", run(["kgdial", "frobnicate"]));
    Ok(())
}
