//! The whole method on the synthetic corpus: pseudo labels, warm-up, then
//! joint reinforcement and curriculum steps. With the default 2000 joint
//! steps the models memorise the corpus.
//!
//! `cargo run --release --example joint_training -- 2000`

use std::time::Instant;

use kgdial::corpus::build_vocabulary;
use kgdial::evaluation::{evaluate, Assembly, EvalSettings};
use kgdial::pseudo::build_warmup_corpora;
use kgdial::synthetic::{toy_corpus, ToySpec};
use kgdial::training::{ModelConfig, Models, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let corpora = build_warmup_corpora(&corpus)?;
    let labels = corpora.labels();
    let model_config = ModelConfig::toy();
    let config = TrainConfig {
        max_steps: steps,
        validation_every: 250,
        ..TrainConfig::toy()
    };
    let settings = EvalSettings {
        assembly: Assembly::Select { t_max: config.t_max },
        response_budget: model_config.response_budget,
        embeddings: None,
    };

    let models = Models::new(&model_config, vocab.len(), config.seed)?;
    let mut trainer = Trainer::new(models, config, model_config, &vocab)?;
    let start = Instant::now();
    trainer.warmup(&corpora)?;
    let report = evaluate(&trainer.models, &corpus, &settings, &vocab)?;
    println!("after warm-up ({:.0?}): {}", start.elapsed(), report.to_json_line());

    let records = trainer.joint_train(&corpus, &labels, Some(&corpus), &mut |_, r, best| {
        println!(
            "step {:>5}  p {:.3}  reward {:.3}  L_G {:.4}  ppl {:.3}{}",
            r.step,
            r.p,
            r.mean_reward.unwrap_or(f64::NAN),
            r.l_g.unwrap_or(f64::NAN),
            r.validation_ppl.unwrap_or(f64::NAN),
            if best { " *" } else { "" }
        );
        Ok(())
    })?;
    let report = evaluate(&trainer.models, &corpus, &settings, &vocab)?;
    println!("after {} joint steps ({:.0?}): {}", records.len(), start.elapsed(), report.to_json_line());
    Ok(())
}
