//! A small generated corpus for smoke runs and overfitting checks.
//!
//! Every example names a topic in its last utterance. One knowledge
//! sentence states a fact about that topic; the others state facts about
//! unrelated topics in the same template. The response restates the
//! relevant fact, so the pseudo label's first sentence is the relevant one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Example, Speaker, Split, Utterance};

const TOPICS: [&str; 24] = [
    "otters", "camels", "parrots", "wolves", "beavers", "herons", "lizards", "moles", "geese", "ferrets",
    "badgers", "lemurs", "pandas", "walruses", "falcons", "tortoises", "hedgehogs", "squirrels",
    "koalas", "bison", "llamas", "penguins", "rabbits", "salmon",
];

const FOODS: [&str; 24] = [
    "clams", "dates", "seeds", "deer", "bark", "frogs", "crickets", "worms", "grass", "mice", "roots",
    "figs", "bamboo", "mussels", "pigeons", "melons", "beetles", "acorns", "leaves", "hay", "clover",
    "krill", "carrots", "shrimp",
];

const OPENERS: [&str; 4] = ["hello there", "good morning", "hey friend", "hi again"];

/// Parameters of [`toy_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub examples: usize,
    pub knowledge_per_example: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            examples: 16,
            knowledge_per_example: 4,
            seed: 0,
        }
    }
}

fn fact(topic: &str, food: &str) -> String {
    format!("{topic} eat {food} every day")
}

/// Builds the corpus described in the module docs. At most 16 examples
/// are available; the remaining topics serve as distractors.
pub fn toy_corpus(spec: ToySpec) -> Corpus {
    assert!(spec.examples <= 16, "at most 16 toy examples");
    assert!(spec.knowledge_per_example >= 1 && spec.knowledge_per_example <= 9);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let distractors: Vec<usize> = (16..TOPICS.len()).collect();
    let examples = (0..spec.examples)
        .map(|i| {
            let topic = TOPICS[i];
            let mut knowledge = vec![fact(topic, FOODS[i])];
            let mut pool = distractors.clone();
            pool.shuffle(&mut rng);
            for &d in pool.iter().take(spec.knowledge_per_example - 1) {
                let food = FOODS[rng.gen_range(16..FOODS.len())];
                knowledge.push(fact(TOPICS[d], food));
            }
            knowledge.shuffle(&mut rng);
            let gold = knowledge.iter().position(|k| k.starts_with(topic)).expect("relevant fact");
            Example {
                context: vec![
                    Utterance::new(Speaker::A, OPENERS[i % OPENERS.len()]),
                    Utterance::new(Speaker::B, format!("tell me about {topic}")),
                ],
                knowledge,
                response: format!("did you know {}", fact(topic, FOODS[i])),
                gold_knowledge_index: Some(gold),
                topic: Some(topic.to_string()),
            }
        })
        .collect();
    Corpus::new(Split::Train, examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::build_pseudo_label;

    #[test]
    fn examples_are_valid_and_labels_point_at_the_fact() {
        let corpus = toy_corpus(ToySpec::default());
        assert_eq!(corpus.len(), 16);
        for (i, ex) in corpus.examples.iter().enumerate() {
            ex.validate(i + 1).unwrap();
            let label = build_pseudo_label(&ex.knowledge, &ex.response).unwrap();
            assert_eq!(label.m_bar, 1);
            assert_eq!(Some(label.ranked_indices[0]), ex.gold_knowledge_index);
        }
        assert_eq!(corpus, toy_corpus(ToySpec::default()));
        let positions: std::collections::HashSet<_> =
            corpus.examples.iter().map(|e| e.gold_knowledge_index).collect();
        assert!(positions.len() > 1);
    }
}
