//! Pseudo ground-truth knowledge from gold responses, with the on-disk cache.

use kgdial::pseudo::{build_pseudo_label, load_or_build};
use kgdial::synthetic::{toy_corpus, ToySpec};

fn main() -> anyhow::Result<()> {
    let knowledge = vec![
        "the tower is 300 metres tall".to_string(),
        "it was built in 1889".to_string(),
        "paris is in france".to_string(),
    ];
    let response = "it is 300 metres tall and was built in 1889";
    let label = build_pseudo_label(&knowledge, response)?;
    println!("ranked {:?} scores {:?}", label.ranked_indices, label.scores);
    println!("pseudo knowledge ({} sentences):", label.m_bar);
    for &i in label.selected() {
        println!("  {}", knowledge[i]);
    }

    let corpus = toy_corpus(ToySpec::default());
    let dir = tempfile::tempdir()?;
    let cache = dir.path().join("pseudo.jsonl");
    let labels = load_or_build(&cache, &corpus)?;
    let again = load_or_build(&cache, &corpus)?;
    assert_eq!(labels, again);
    let hits = corpus
        .examples
        .iter()
        .zip(&labels)
        .filter(|(ex, l)| ex.gold_knowledge_index == Some(l.ranked_indices[0]))
        .count();
    println!("toy corpus: top pseudo sentence is the gold one in {hits}/{} examples", corpus.len());
    Ok(())
}
