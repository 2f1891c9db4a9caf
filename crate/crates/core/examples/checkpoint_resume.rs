//! Save a training run midway, reload it and continue; the resumed run
//! matches an uninterrupted one exactly.

use kgdial::checkpoint::{load_checkpoint, save_checkpoint};
use kgdial::corpus::build_vocabulary;
use kgdial::pseudo::build_warmup_corpora;
use kgdial::synthetic::{toy_corpus, ToySpec};
use kgdial::training::{ModelConfig, Models, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let corpora = build_warmup_corpora(&corpus)?;
    let labels = corpora.labels();
    let model_config = ModelConfig::toy();
    let config = TrainConfig {
        warmup_steps: 20,
        max_steps: 10,
        ..TrainConfig::toy()
    };
    let fresh = || -> anyhow::Result<Trainer<'_>> {
        let models = Models::new(&model_config, vocab.len(), config.seed)?;
        let mut t = Trainer::new(models, config.clone(), model_config, &vocab)?;
        t.warmup(&corpora)?;
        Ok(t)
    };

    let mut straight = fresh()?;
    let full = straight.joint_train(&corpus, &labels, None, &mut |_, _, _| Ok(()))?;

    let mut first = fresh()?;
    first.config.max_steps = 5;
    first.joint_train(&corpus, &labels, None, &mut |_, _, _| Ok(()))?;
    let dir = tempfile::tempdir()?;
    save_checkpoint(dir.path(), &first.models, &first.state, &model_config, &first.config, &vocab)?;
    println!("saved step {} to {}", first.state.step, dir.path().display());

    let ck = load_checkpoint(dir.path())?;
    ck.check_resume(&model_config, &config)?;
    let mut resumed = Trainer::new(ck.models, config.clone(), model_config, &ck.vocabulary)?;
    resumed.state = ck.state;
    let rest = resumed.joint_train(&corpus, &labels, None, &mut |_, _, _| Ok(()))?;
    for (a, b) in full[5..].iter().zip(&rest) {
        println!(
            "step {}: L_G uninterrupted {:.12} resumed {:.12}",
            a.step,
            a.l_g.unwrap_or(f64::NAN),
            b.l_g.unwrap_or(f64::NAN)
        );
    }
    assert_eq!(resumed.models, straight.models);
    println!("final parameters are bitwise identical");
    Ok(())
}
