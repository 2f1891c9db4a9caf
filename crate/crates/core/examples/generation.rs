//! Input assembly under a token budget, greedy decoding and scoring.

use kgdial::corpus::{build_vocabulary, Speaker, Tokenizer, Utterance};
use kgdial::generation::{
    assemble_input, assemble_trunc_baseline, generate, response_nll, response_targets, Generator, GeneratorConfig,
};
use kgdial::synthetic::{toy_corpus, ToySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let corpus = toy_corpus(ToySpec::default());
    let vocab = build_vocabulary(&corpus, 1000)?;
    let ex = &corpus.examples[0];

    let gold = ex.gold_knowledge_index.unwrap_or(0);
    let input = assemble_input(&ex.context, &ex.knowledge[gold..=gold], 128, 32, &vocab)?;
    println!("assembled {} tokens: {}", input.len(), vocab.decode(&input.tokens));

    // a long history is cut oldest-first to fit 64 - 16 tokens
    let long: Vec<Utterance> = (0..20)
        .map(|i| Utterance::new(if i % 2 == 0 { Speaker::A } else { Speaker::B }, "tell me about otters again"))
        .collect();
    let cut = assemble_input(&long, &ex.knowledge, 64, 16, &vocab)?;
    println!("20-turn history assembled into {} tokens", cut.len());
    for budget in [64, 96, 128] {
        let t = assemble_trunc_baseline(&ex.context, &ex.knowledge, budget, 16, &vocab)?;
        println!("truncation baseline at {budget}: {} tokens", t.len());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let generator = Generator::new(
        GeneratorConfig {
            capacity: 128,
            ..GeneratorConfig::default()
        },
        vocab.len(),
        &mut rng,
    )?;
    let out = generate(&generator, &input, 12, &vocab)?;
    println!("untrained output: {:?} (mean NLL {:.3})", out.text, out.mean_nll());
    let nlls = response_nll(&generator, &input, &response_targets(&vocab, &ex.response))?;
    println!("gold response NLL per token: {nlls:.2?}");
    Ok(())
}
