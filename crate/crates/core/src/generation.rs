//! Response generation from context plus selected knowledge.
//!
//! The generator input is laid out as
//!
//! ```text
//! knowledge [SEP] u_1 [SEP] u_2 ... [SEP] u_n [BOS] r_1 r_2 ...
//! ```
//!
//! so the newest utterance sits next to the response. Segment ids are 0
//! for knowledge, 1 for context and 2 from `[BOS]` on. Output logits use
//! the token embedding matrix (tied) plus a bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Matrix, ParamStore, Tape, Var};
use crate::corpus::{Tokenizer, TokenId, Utterance, BOS, EOS, PAD, RESERVED_TOKENS, SEP};
use crate::error::{Error, Result};
use crate::nn::{IncrementalDecoder, SeqBatch, Transformer, TransformerConfig};

pub const MIN_CAPACITY: usize = 64;
pub const MIN_INPUT_ROOM: usize = 16;

pub const SEGMENT_KNOWLEDGE: u8 = 0;
pub const SEGMENT_CONTEXT: u8 = 1;
pub const SEGMENT_RESPONSE: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub tokens: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Builds the generator input from the selected sentences, in the given
/// order.
///
/// Over `capacity - response_budget` tokens, whole utterances are dropped
/// oldest first, then the knowledge tail is cut. The newest utterance is
/// only cut (at its tail) when it cannot fit on its own.
pub fn assemble_input(
    context: &[Utterance],
    selected_knowledge: &[String],
    capacity: usize,
    response_budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<AssembledInput> {
    if capacity < response_budget + MIN_INPUT_ROOM {
        return Err(Error::Config(format!(
            "capacity {capacity} leaves fewer than {MIN_INPUT_ROOM} input tokens after a response budget of {response_budget}"
        )));
    }
    if context.is_empty() {
        return Err(Error::InvalidArgument("empty dialogue context".into()));
    }
    let limit = capacity - response_budget;
    let knowledge: Vec<TokenId> = selected_knowledge
        .iter()
        .flat_map(|k| tokenizer.encode(k))
        .collect();
    let utterances: Vec<Vec<TokenId>> = context.iter().map(|u| tokenizer.encode(&u.text)).collect();

    // context cost: utterances, SEP between them, BOS
    let context_cost = |utts: &[Vec<TokenId>]| utts.iter().map(Vec::len).sum::<usize>() + utts.len();
    let knowledge_cost = |n: usize| if n == 0 { 0 } else { n + 1 };

    let mut first = 0;
    while first + 1 < utterances.len()
        && knowledge_cost(knowledge.len()) + context_cost(&utterances[first..]) > limit
    {
        first += 1;
    }
    let kept = &utterances[first..];
    let room = limit.saturating_sub(context_cost(kept));
    // room for knowledge tokens once its SEP is paid for
    let know_keep = knowledge.len().min(room.saturating_sub(1));

    let mut tokens = Vec::with_capacity(limit);
    let mut segment_ids = Vec::with_capacity(limit);
    if know_keep > 0 {
        tokens.extend_from_slice(&knowledge[..know_keep]);
        tokens.push(SEP);
        segment_ids.resize(tokens.len(), SEGMENT_KNOWLEDGE);
    }
    if kept.len() == 1 && kept[0].len() + 1 > limit {
        tokens.extend_from_slice(&kept[0][..limit - 1]);
    } else {
        for (i, utt) in kept.iter().enumerate() {
            if i > 0 {
                tokens.push(SEP);
            }
            tokens.extend_from_slice(utt);
        }
    }
    segment_ids.resize(tokens.len(), SEGMENT_CONTEXT);
    tokens.push(BOS);
    segment_ids.push(SEGMENT_RESPONSE);
    debug_assert!(tokens.len() <= limit);
    Ok(AssembledInput { tokens, segment_ids })
}

/// The no-selection baseline: every knowledge sentence in document order,
/// truncated by the same rule as [`assemble_input`].
pub fn assemble_trunc_baseline(
    context: &[Utterance],
    full_knowledge: &[String],
    capacity: usize,
    response_budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<AssembledInput> {
    assemble_input(context, full_knowledge, capacity, response_budget, tokenizer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    /// Maximum sequence length, input plus response.
    pub capacity: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 2,
            ff_width: 256,
            capacity: 1024,
        }
    }
}

/// Causal transformer language model.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub transformer: Transformer,
    pub store: ParamStore,
    out_bias: usize,
}

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        if config.capacity < MIN_CAPACITY {
            return Err(Error::Config(format!(
                "generator capacity {} is below {MIN_CAPACITY}",
                config.capacity
            )));
        }
        let mut store = ParamStore::new();
        let transformer = Transformer::init(
            &mut store,
            TransformerConfig {
                vocab_size,
                width: config.width,
                heads: config.heads,
                layers: config.layers,
                ff_width: config.ff_width,
                max_positions: config.capacity,
                segment_types: 3,
                causal: true,
            },
            "generator",
            rng,
        )?;
        let out_bias = store.add("generator.out_bias", Matrix::zeros((1, vocab_size)));
        Ok(Self {
            config,
            transformer,
            store,
            out_bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.transformer.config.vocab_size
    }

    pub fn output_bias_index(&self) -> usize {
        self.out_bias
    }

    /// Per-row NLL column for a stacked batch (0 on rows without a target)
    /// and the number of scored tokens. `response` holds the targets that
    /// follow `[BOS]`.
    pub(crate) fn nll_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        items: &[(&AssembledInput, &[TokenId])],
    ) -> Result<(Var, usize)> {
        let mut batch = SeqBatch::default();
        let mut targets = Vec::new();
        let mut scored = 0;
        for (input, response) in items {
            let response = strip_padding(response);
            if input.is_empty() {
                return Err(Error::InvalidArgument("empty generator input".into()));
            }
            let len = input.len() + response.len().saturating_sub(1);
            if len > self.config.capacity {
                return Err(Error::Capacity {
                    needed: len,
                    capacity: self.config.capacity,
                });
            }
            let mut ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
            let mut segs: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
            targets.extend(std::iter::repeat(None).take(input.len() - 1));
            for (i, &tok) in response.iter().enumerate() {
                targets.push(Some(tok as usize));
                // the final target is predicted but never fed
                if i + 1 < response.len() {
                    ids.push(tok as usize);
                    segs.push(SEGMENT_RESPONSE as usize);
                }
            }
            if response.is_empty() {
                targets.push(None);
            }
            scored += response.len();
            batch.push(&ids, &segs);
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Shape(format!("target token {bad} outside vocabulary")));
        }
        let hidden = self.transformer.forward(tape, bound, &batch)?;
        let emb = bound.var(self.transformer.token_embedding_index());
        let logits = tape.matmul_t(hidden, emb);
        let logits = tape.add_row(logits, bound.var(self.out_bias));
        let nll = tape.cross_entropy(logits, &targets);
        Ok((nll, scored))
    }

    fn logits(&self, hidden: &ndarray::Array1<f64>) -> ndarray::Array1<f64> {
        let emb = self.store.get(self.transformer.token_embedding_index());
        emb.dot(hidden) + &self.store.get(self.out_bias).row(0)
    }
}

fn strip_padding(tokens: &[TokenId]) -> &[TokenId] {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    &tokens[..end]
}

/// Gold response tokens followed by `[EOS]`.
pub fn response_targets(tokenizer: &dyn Tokenizer, response: &str) -> Vec<TokenId> {
    let mut ids = tokenizer.encode(response);
    ids.push(EOS);
    ids
}

/// Teacher-forced NLL of each token of `response`. Trailing `[PAD]`s are
/// ignored.
pub fn response_nll(generator: &Generator, input: &AssembledInput, response: &[TokenId]) -> Result<Vec<f64>> {
    let response = strip_padding(response);
    let mut tape = Tape::new();
    let bound = tape.bind(&generator.store);
    let (nll, _) = generator.nll_on_tape(&mut tape, &bound, &[(input, response)])?;
    let column = tape.value(nll);
    let start = input.len() - 1;
    Ok((0..response.len()).map(|i| column[[start + i, 0]]).collect())
}

/// Summed teacher-forced NLL of `response` and its gradients with respect
/// to the generator parameters, in store order.
pub fn response_nll_gradients(
    generator: &Generator,
    input: &AssembledInput,
    response: &[TokenId],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = tape.bind(&generator.store);
    let (nll, _) = generator.nll_on_tape(&mut tape, &bound, &[(input, strip_padding(response))])?;
    let total = tape.sum(nll);
    let grads = tape.backward(total);
    Ok((tape.scalar(total), grads.for_bound(&bound, &generator.store)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub ids: Vec<TokenId>,
    pub text: String,
    pub log_probs: Vec<f64>,
    /// Decoding stopped because the sequence reached the capacity.
    pub hit_capacity: bool,
}

impl GenerationOutput {
    pub fn mean_nll(&self) -> f64 {
        if self.log_probs.is_empty() {
            0.0
        } else {
            -self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
        }
    }
}

/// Response text without reserved tokens.
pub fn decode_response(tokenizer: &dyn Tokenizer, ids: &[TokenId]) -> String {
    let content: Vec<TokenId> = ids
        .iter()
        .copied()
        .filter(|&id| id as usize >= RESERVED_TOKENS.len())
        .collect();
    tokenizer.decode(&content)
}

/// Greedy decoding until `[EOS]` (kept in `ids`) or `max_len` tokens.
pub fn generate(
    generator: &Generator,
    input: &AssembledInput,
    max_len: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<GenerationOutput> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    if input.is_empty() {
        return Err(Error::InvalidArgument("empty generator input".into()));
    }
    let capacity = generator.config.capacity;
    if input.len() > capacity {
        return Err(Error::Capacity {
            needed: input.len(),
            capacity,
        });
    }
    let mut decoder = IncrementalDecoder::new(&generator.transformer, &generator.store);
    let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
    let segs: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
    let mut hidden = decoder.feed(&ids, &segs)?;
    let mut out = Vec::new();
    let mut log_probs = Vec::new();
    let mut hit_capacity = false;
    loop {
        let logits = generator.logits(&hidden);
        let (best, best_logit) = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let log_z = best_logit + logits.iter().map(|&v| (v - best_logit).exp()).sum::<f64>().ln();
        out.push(best as TokenId);
        log_probs.push(best_logit - log_z);
        if best as TokenId == EOS || out.len() >= max_len {
            break;
        }
        if decoder.len() >= capacity {
            hit_capacity = true;
            break;
        }
        hidden = decoder.feed(&[best], &[SEGMENT_RESPONSE as usize])?;
    }
    Ok(GenerationOutput {
        text: decode_response(tokenizer, &out),
        ids: out,
        log_probs,
        hit_capacity,
    })
}
