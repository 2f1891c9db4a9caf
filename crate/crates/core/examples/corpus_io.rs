//! Write a corpus to disk, load it back and tokenise it.

use kgdial::corpus::{build_vocabulary, encode_text, load_corpus, write_corpus, Split, Tokenizer};
use kgdial::synthetic::{toy_corpus, ToySpec};

fn main() -> anyhow::Result<()> {
    let corpus = toy_corpus(ToySpec::default());
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("train.jsonl");
    write_corpus(&path, &corpus)?;
    let loaded = load_corpus(&path, Split::Train)?;
    assert_eq!(loaded, corpus);
    println!("{} examples round-tripped through {}", loaded.len(), path.display());

    let first = &loaded.examples[0];
    println!("context:   {:?}", first.context.iter().map(|u| &u.text).collect::<Vec<_>>());
    println!("knowledge: {:?}", first.knowledge);
    println!("response:  {}", first.response);

    let vocab = build_vocabulary(&loaded, 1000)?;
    let ids = encode_text(&vocab, "did you know otters eat zebras");
    println!("vocabulary size {}; ids {ids:?}", vocab.len());
    println!("decoded: {}", vocab.decode(&ids));
    Ok(())
}
