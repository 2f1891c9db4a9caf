//! The four ablation switches side by side on the synthetic corpus.
//!
//! `cargo run --release --example ablations -- 500`

use kgdial::corpus::build_vocabulary;
use kgdial::evaluation::{evaluate, Assembly, EvalSettings};
use kgdial::pseudo::build_warmup_corpora;
use kgdial::synthetic::{toy_corpus, ToySpec};
use kgdial::training::{ModelConfig, Models, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(500);
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let corpora = build_warmup_corpora(&corpus)?;
    let labels = corpora.labels();
    let model_config = ModelConfig::toy();
    let base = TrainConfig {
        max_steps: steps,
        ..TrainConfig::toy()
    };
    let settings = EvalSettings {
        assembly: Assembly::Select { t_max: base.t_max },
        response_budget: model_config.response_budget,
        embeddings: None,
    };
    let variants: [(&str, fn(&mut TrainConfig)); 5] = [
        ("full", |_| {}),
        ("-pseudo", |c| c.pseudo = false),
        ("-joint", |c| c.joint = false),
        ("-reinforcement", |c| c.reinforcement = false),
        ("-curriculum", |c| c.curriculum = false),
    ];
    println!("{:<15} {:>9} {:>7} {:>9}", "variant", "ppl", "f1", "sel acc");
    for (name, apply) in variants {
        let mut config = base.clone();
        apply(&mut config);
        let models = Models::new(&model_config, vocab.len(), config.seed)?;
        let mut trainer = Trainer::new(models, config, model_config, &vocab)?;
        trainer.warmup(&corpora)?;
        trainer.joint_train(&corpus, &labels, None, &mut |_, _, _| Ok(()))?;
        let r = evaluate(&trainer.models, &corpus, &settings, &vocab)?;
        println!(
            "{name:<15} {:>9.3} {:>7.3} {:>9.3}",
            r.ppl,
            r.f1,
            r.selection_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
