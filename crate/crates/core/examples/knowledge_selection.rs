//! Encode knowledge candidates and run the sequential selector.

use kgdial::corpus::build_vocabulary;
use kgdial::selection::{
    build_encoder_inputs, encode_candidates, select, select_from_encodings, selection_nll, step_distribution,
    EncoderConfig, KnowledgeEncoder, SelectMode, SelectionTarget, Selector, SelectorConfig,
};
use kgdial::synthetic::{toy_corpus, ToySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = KnowledgeEncoder::new(
        EncoderConfig {
            layers: 1,
            budget: 64,
            ..EncoderConfig::default()
        },
        vocab.len(),
        &mut rng,
    )?;
    let selector = Selector::new(SelectorConfig { hidden: 64, layers: 1 }, encoder.dim(), &mut rng)?;

    let ex = &corpus.examples[0];
    let inputs = build_encoder_inputs(&ex.context, &ex.knowledge, encoder.config.budget, &vocab)?;
    println!("encoder input for sentence 0 has {} tokens", inputs[0].tokens.len());
    let encodings = encode_candidates(&encoder, &inputs)?;

    // step one never offers the termination candidate
    let mut mask = vec![false; encodings.candidates() + 1];
    mask[encodings.candidates()] = true;
    let probs = step_distribution(&selector, &selector.initial_state(), &encodings, &mask)?;
    println!("first-step distribution (untrained): {probs:.3?}");

    let greedy = select(&encoder, &selector, &ex.context, &ex.knowledge, &vocab, 3, SelectMode::Greedy, None)?;
    println!(
        "greedy: {:?}, terminated by {:?}, log p = {:.3}",
        greedy.indices, greedy.terminated_by, greedy.total_log_prob
    );
    for seed in 0..3 {
        let s = select_from_encodings(&selector, &encodings, 3, SelectMode::Sample, Some(seed))?;
        println!("sample {seed}: {:?} {:?}", s.indices, s.terminated_by);
    }
    let target = SelectionTarget {
        indices: vec![ex.gold_knowledge_index.unwrap_or(0)],
        terminal: true,
    };
    println!(
        "NLL of [gold, stop] = {:.3}",
        selection_nll(&encoder, &selector, &ex.context, &ex.knowledge, &vocab, &target)?
    );
    Ok(())
}
