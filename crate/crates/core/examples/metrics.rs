//! Automatic metrics on hand-written responses.

use kgdial::metrics::{bow_metrics, perplexity, selection_accuracy, unigram_f1, EmbeddingTable};

fn main() -> anyhow::Result<()> {
    let reference = "otters eat clams every day";
    for hyp in ["otters eat clams every day", "otters eat fish", "hello there"] {
        println!("f1({hyp:?}) = {:.3}", unigram_f1(hyp, reference));
    }

    let mut table = EmbeddingTable::new(3)?;
    for (word, v) in [
        ("otters", [1.0, 0.2, 0.0]),
        ("eat", [0.0, 1.0, 0.1]),
        ("clams", [0.3, 0.0, 1.0]),
        ("fish", [0.4, 0.1, 0.9]),
        ("every", [0.1, 0.1, 0.1]),
        ("day", [0.2, 0.0, 0.3]),
    ] {
        table.insert(word, v.to_vec())?;
    }
    let scores = bow_metrics("otters eat fish", reference, &table);
    println!(
        "average {:.3}, extrema {:.3}, greedy {:.3}",
        scores.average, scores.extrema, scores.greedy
    );

    println!("perplexity of [0.5, 1.0, 1.5] = {:.3}", perplexity(&[0.5, 1.0, 1.5])?);
    println!("selection accuracy = {:.2}", selection_accuracy(&[0, 2, 1, 1], &[0, 2, 0, 1])?);
    Ok(())
}
