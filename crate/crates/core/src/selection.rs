//! Knowledge selection: a context-aware candidate encoder followed by a
//! recurrent pointer that picks sentences one at a time.
//!
//! Each candidate is encoded jointly with the flattened context as
//! `[CLS] context [SEP] sentence [SEP]` and represented by the final-layer
//! vector at the `[CLS]` position. A trainable termination vector is
//! appended as candidate `m`. At step `t` the selector scores every
//! candidate with `vᵀ tanh(W_e e_i + W_s s_t + b_attn)`, normalises over the
//! candidates that are still allowed, and feeds the chosen vector to an
//! LSTM to obtain `s_{t+1}`.
//!
//! Masking: the termination vector is unavailable at the first step and
//! chosen sentences are unavailable afterwards, so a selection is never
//! empty and never repeats a sentence.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Matrix, ParamStore, Tape, Var};
use crate::corpus::{Tokenizer, TokenId, Utterance, CLS, SEP};
use crate::error::{Error, Result};
use crate::nn::{normal_matrix, SeqBatch, Transformer, TransformerConfig};

pub const MIN_ENCODER_BUDGET: usize = 8;

/// `[CLS] context [SEP] knowledge [SEP]` with segment 0 for the first three
/// parts and segment 1 for the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInput {
    pub tokens: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One encoder input per knowledge sentence, each paired with the whole
/// flattened context.
///
/// Over budget, the oldest context tokens go first (the context keeps at
/// least a quarter of the budget) and then the sentence's tail.
pub fn build_encoder_inputs(
    context: &[Utterance],
    knowledge: &[String],
    budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<EncoderInput>> {
    if budget < MIN_ENCODER_BUDGET {
        return Err(Error::Config(format!(
            "encoder budget {budget} is below the minimum of {MIN_ENCODER_BUDGET}"
        )));
    }
    if knowledge.is_empty() {
        return Err(Error::InvalidArgument("no knowledge sentences".into()));
    }
    if context.is_empty() {
        return Err(Error::InvalidArgument("empty dialogue context".into()));
    }
    let ctx: Vec<TokenId> = context.iter().flat_map(|u| tokenizer.encode(&u.text)).collect();
    let available = budget - 3;
    let ctx_floor = budget / 4;
    knowledge
        .iter()
        .map(|sentence| {
            let know = tokenizer.encode(sentence);
            let (ctx_keep, know_keep) = if ctx.len() + know.len() <= available {
                (ctx.len(), know.len())
            } else {
                let ctx_keep = ctx
                    .len()
                    .min(ctx_floor.max(available.saturating_sub(know.len())));
                (ctx_keep, know.len().min(available - ctx_keep))
            };
            let mut tokens = Vec::with_capacity(3 + ctx_keep + know_keep);
            tokens.push(CLS);
            tokens.extend_from_slice(&ctx[ctx.len() - ctx_keep..]);
            tokens.push(SEP);
            let first_segment = tokens.len();
            tokens.extend_from_slice(&know[..know_keep]);
            tokens.push(SEP);
            let mut segment_ids = vec![0u8; tokens.len()];
            segment_ids[first_segment..].iter_mut().for_each(|s| *s = 1);
            Ok(EncoderInput {
                tokens,
                segment_ids,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    /// Maximum encoder input length in tokens.
    pub budget: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 2,
            ff_width: 256,
            budget: 512,
        }
    }
}

/// Bidirectional transformer over candidate inputs plus the termination
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEncoder {
    pub config: EncoderConfig,
    pub transformer: Transformer,
    pub store: ParamStore,
    e_spe: usize,
}

impl KnowledgeEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        if config.budget < MIN_ENCODER_BUDGET {
            return Err(Error::Config(format!("encoder budget {} too small", config.budget)));
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
                max_positions: config.budget,
                segment_types: 2,
                causal: false,
            },
            "encoder",
            rng,
        )?;
        let e_spe = store.add("encoder.e_spe", normal_matrix(rng, 1, config.width, 1.0));
        Ok(Self {
            config,
            transformer,
            store,
            e_spe,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.width
    }

    pub fn termination_embedding(&self) -> &Matrix {
        self.store.get(self.e_spe)
    }

    /// Encodes the candidates of several examples in one pass; each result
    /// is an `(m + 1) x d` matrix whose last row is the termination vector.
    pub fn encode_on_tape(&self, tape: &mut Tape, bound: &Bound, examples: &[&[EncoderInput]]) -> Result<Vec<Var>> {
        let mut batch = SeqBatch::default();
        for inputs in examples {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument("no candidate inputs".into()));
            }
            for input in inputs.iter() {
                let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
                let segs: Vec<usize> = input.segment_ids.iter().map(|&s| s as usize).collect();
                batch.push(&ids, &segs);
            }
        }
        let hidden = self.transformer.forward(tape, bound, &batch)?;
        let cls_rows: Vec<usize> = batch.segments.iter().map(|s| s.start).collect();
        let cls = tape.gather(hidden, &cls_rows);
        let e_spe = bound.var(self.e_spe);
        let mut out = Vec::with_capacity(examples.len());
        let mut offset = 0;
        for inputs in examples {
            let m = inputs.len();
            let rows = tape.slice_rows(cls, offset, offset + m);
            out.push(tape.concat_rows(&[rows, e_spe]));
            offset += m;
        }
        Ok(out)
    }
}

/// Candidate vectors `e_1..e_m` followed by the termination vector.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeEncodings {
    pub vectors: Matrix,
}

impl KnowledgeEncodings {
    /// Number of real candidates `m`.
    pub fn candidates(&self) -> usize {
        self.vectors.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Inference-mode candidate encoding.
pub fn encode_candidates(encoder: &KnowledgeEncoder, inputs: &[EncoderInput]) -> Result<KnowledgeEncodings> {
    let mut tape = Tape::new();
    let bound = tape.bind(&encoder.store);
    let vars = encoder.encode_on_tape(&mut tape, &bound, &[inputs])?;
    Ok(KnowledgeEncodings {
        vectors: tape.value(vars[0]).clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LstmIdx {
    w_x: usize,
    w_h: usize,
    bias: usize,
    h0: usize,
    c0: usize,
}

/// Attention pointer over candidates driven by a stacked LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub config: SelectorConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    w_e: usize,
    w_s: usize,
    b_attn: usize,
    v: usize,
    lstm: Vec<LstmIdx>,
}

/// Recurrent state: hidden and cell rows per LSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    pub h: Vec<Matrix>,
    pub c: Vec<Matrix>,
}

impl SelectorState {
    /// The top-layer hidden vector `s_t` used for attention.
    pub fn top(&self) -> &Matrix {
        self.h.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
struct TapeState {
    h: Vec<Var>,
    c: Vec<Var>,
}

impl Selector {
    pub fn new<R: Rng>(config: SelectorConfig, input_dim: usize, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 || config.layers == 0 || input_dim == 0 {
            return Err(Error::Config("selector dimensions must be positive".into()));
        }
        let h = config.hidden;
        let mut store = ParamStore::new();
        let w_e = store.add("selector.w_e", normal_matrix(rng, input_dim, h, 1.0 / (input_dim as f64).sqrt()));
        let w_s = store.add("selector.w_s", normal_matrix(rng, h, h, 1.0 / (h as f64).sqrt()));
        let b_attn = store.add("selector.b_attn", Matrix::zeros((1, h)));
        let v = store.add("selector.v", normal_matrix(rng, h, 1, 1.0 / (h as f64).sqrt()));
        let mut lstm = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let in_dim = if l == 0 { input_dim } else { h };
            let mut bias = Matrix::zeros((1, 4 * h));
            // forget-gate bias starts at 1
            bias.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
            lstm.push(LstmIdx {
                w_x: store.add(format!("selector.lstm{l}.w_x"), normal_matrix(rng, in_dim, 4 * h, 1.0 / (in_dim as f64).sqrt())),
                w_h: store.add(format!("selector.lstm{l}.w_h"), normal_matrix(rng, h, 4 * h, 1.0 / (h as f64).sqrt())),
                bias: store.add(format!("selector.lstm{l}.bias"), bias),
                h0: store.add(format!("selector.lstm{l}.h0"), Matrix::zeros((1, h))),
                c0: store.add(format!("selector.lstm{l}.c0"), Matrix::zeros((1, h))),
            });
        }
        Ok(Self {
            config,
            input_dim,
            store,
            w_e,
            w_s,
            b_attn,
            v,
            lstm,
        })
    }

    /// Index of the attention vector `v` in [`Selector::store`].
    pub fn attention_vector_index(&self) -> usize {
        self.v
    }

    pub fn initial_state(&self) -> SelectorState {
        SelectorState {
            h: self.lstm.iter().map(|l| self.store.get(l.h0).clone()).collect(),
            c: self.lstm.iter().map(|l| self.store.get(l.c0).clone()).collect(),
        }
    }

    fn initial_state_tape(&self, bound: &Bound) -> TapeState {
        TapeState {
            h: self.lstm.iter().map(|l| bound.var(l.h0)).collect(),
            c: self.lstm.iter().map(|l| bound.var(l.c0)).collect(),
        }
    }

    fn project_candidates(&self, tape: &mut Tape, bound: &Bound, enc: Var) -> Var {
        tape.matmul(enc, bound.var(self.w_e))
    }

    /// Masked log-probabilities over the `m + 1` candidates, as `1 x (m+1)`.
    fn log_probs_tape(&self, tape: &mut Tape, bound: &Bound, projected: Var, top: Var, mask: &[bool]) -> Var {
        let s = tape.matmul(top, bound.var(self.w_s));
        let s = tape.add(s, bound.var(self.b_attn));
        let pre = tape.add_row(projected, s);
        let act = tape.tanh(pre);
        let scores = tape.matmul(act, bound.var(self.v));
        let row = tape.transpose(scores);
        tape.masked_log_softmax(row, mask)
    }

    fn advance_tape(&self, tape: &mut Tape, bound: &Bound, state: &TapeState, input: Var) -> TapeState {
        let h = self.config.hidden;
        let mut x = input;
        let mut next = TapeState {
            h: Vec::with_capacity(self.lstm.len()),
            c: Vec::with_capacity(self.lstm.len()),
        };
        for (l, idx) in self.lstm.iter().enumerate() {
            let gx = tape.matmul(x, bound.var(idx.w_x));
            let gh = tape.matmul(state.h[l], bound.var(idx.w_h));
            let g = tape.add(gx, gh);
            let g = tape.add(g, bound.var(idx.bias));
            let i = tape.slice_cols(g, 0, h);
            let f = tape.slice_cols(g, h, 2 * h);
            let c_hat = tape.slice_cols(g, 2 * h, 3 * h);
            let o = tape.slice_cols(g, 3 * h, 4 * h);
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let c_hat = tape.tanh(c_hat);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, state.c[l]);
            let write = tape.mul(i, c_hat);
            let c = tape.add(keep, write);
            let c_act = tape.tanh(c);
            let h_new = tape.mul(o, c_act);
            next.h.push(h_new);
            next.c.push(c);
            x = h_new;
        }
        next
    }
}

/// Distribution over the `m + 1` candidates at state `s_t`. Entries with
/// `mask[i] == true` get exactly 0.
pub fn step_distribution(
    selector: &Selector,
    state: &SelectorState,
    encodings: &KnowledgeEncodings,
    mask: &[bool],
) -> Result<Vec<f64>> {
    if mask.len() != encodings.vectors.nrows() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} candidates",
            mask.len(),
            encodings.vectors.nrows()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::InvalidArgument("every candidate is masked".into()));
    }
    check_encodings(selector, encodings)?;
    check_state(selector, state)?;
    let mut tape = Tape::new();
    let bound = tape.bind(&selector.store);
    let enc = tape.constant(encodings.vectors.clone());
    let top = tape.constant(state.top().clone());
    let projected = selector.project_candidates(&mut tape, &bound, enc);
    let logp = selector.log_probs_tape(&mut tape, &bound, projected, top, mask);
    Ok(tape
        .value(logp)
        .iter()
        .zip(mask)
        .map(|(&lp, &m)| if m { 0.0 } else { lp.exp() })
        .collect())
}

/// One LSTM step: `s_{t+1} = LSTM(e_{j_t}, s_t)`.
pub fn advance_state(selector: &Selector, state: &SelectorState, chosen: &[f64]) -> Result<SelectorState> {
    if chosen.len() != selector.input_dim {
        return Err(Error::Shape(format!(
            "chosen vector has {} entries, selector expects {}",
            chosen.len(),
            selector.input_dim
        )));
    }
    check_state(selector, state)?;
    let mut tape = Tape::new();
    let bound = tape.bind(&selector.store);
    let tape_state = TapeState {
        h: state.h.iter().map(|h| tape.constant(h.clone())).collect(),
        c: state.c.iter().map(|c| tape.constant(c.clone())).collect(),
    };
    let x = tape.constant(Matrix::from_shape_vec((1, chosen.len()), chosen.to_vec()).expect("row"));
    let next = selector.advance_tape(&mut tape, &bound, &tape_state, x);
    Ok(SelectorState {
        h: next.h.iter().map(|&v| tape.value(v).clone()).collect(),
        c: next.c.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

fn check_encodings(selector: &Selector, encodings: &KnowledgeEncodings) -> Result<()> {
    if encodings.dim() != selector.input_dim {
        return Err(Error::Shape(format!(
            "encodings have dimension {}, selector expects {}",
            encodings.dim(),
            selector.input_dim
        )));
    }
    if encodings.vectors.nrows() < 2 {
        return Err(Error::Shape("encodings need at least one candidate plus termination".into()));
    }
    Ok(())
}

fn check_state(selector: &Selector, state: &SelectorState) -> Result<()> {
    let ok = state.h.len() == selector.config.layers
        && state.c.len() == selector.config.layers
        && state
            .h
            .iter()
            .chain(&state.c)
            .all(|m| m.dim() == (1, selector.config.hidden));
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("selector state does not match the configuration".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TerminationEmbedding,
    TMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSelection {
    pub indices: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub terminated_by: Termination,
    pub total_log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Greedy,
    Sample,
}

/// Teacher-forcing target: sentence indices, optionally followed by the
/// termination step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTarget {
    pub indices: Vec<usize>,
    pub terminal: bool,
}

pub(crate) enum Policy<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
    Forced(&'a SelectionTarget),
}

/// A selection recorded on a tape; `total` is the summed log-probability.
pub(crate) struct TapeSelection {
    pub selection: KnowledgeSelection,
    pub total: Var,
}

fn step_mask(m: usize, step: usize, chosen: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; m + 1];
    for &j in chosen {
        mask[j] = true;
    }
    mask[m] = step == 0;
    mask
}

fn argmax(values: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.expect("at least one unmasked candidate").0
}

impl Selector {
    /// Runs the pointer over encodings already on `tape`.
    pub(crate) fn rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        encodings: Var,
        t_max: usize,
        mut policy: Policy<'_>,
    ) -> Result<TapeSelection> {
        let m = tape.value(encodings).nrows() - 1;
        if m == 0 {
            return Err(Error::InvalidArgument("no knowledge candidates".into()));
        }
        if t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if let Policy::Forced(target) = &policy {
            validate_target(target, m)?;
        }
        let projected = self.project_candidates(tape, bound, encodings);
        let mut state = self.initial_state_tape(bound);
        let mut indices = Vec::new();
        let mut step_log_probs = Vec::new();
        let mut terms = Vec::new();
        let mut terminated_by = Termination::TMax;
        for step in 0.. {
            let forced_done = matches!(&policy, Policy::Forced(t) if step == t.indices.len() && !t.terminal);
            let forced_end = matches!(&policy, Policy::Forced(t) if step > t.indices.len() || (step == t.indices.len() && t.terminal && step == 0));
            if forced_done || forced_end {
                break;
            }
            if !matches!(policy, Policy::Forced(_)) && indices.len() >= t_max {
                break;
            }
            let mask = step_mask(m, step, &indices);
            let top = *state.h.last().expect("layer");
            let logp = self.log_probs_tape(tape, bound, projected, top, &mask);
            let choice = match &mut policy {
                Policy::Greedy => argmax(tape.value(logp).as_slice().expect("row"), &mask),
                Policy::Sample(rng) => {
                    let weights: Vec<f64> = tape
                        .value(logp)
                        .iter()
                        .zip(&mask)
                        .map(|(&lp, &masked)| if masked { 0.0 } else { lp.exp() })
                        .collect();
                    WeightedIndex::new(&weights)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?
                        .sample(*rng)
                }
                Policy::Forced(target) => target.indices.get(step).copied().unwrap_or(m),
            };
            let picked = tape.pick(logp, 0, choice);
            step_log_probs.push(tape.scalar(picked));
            terms.push((picked, 1.0));
            if choice == m {
                terminated_by = Termination::TerminationEmbedding;
                break;
            }
            indices.push(choice);
            let x = tape.slice_rows(encodings, choice, choice + 1);
            state = self.advance_tape(tape, bound, &state, x);
        }
        let total = tape.weighted_sum(&terms);
        let total_log_prob = step_log_probs.iter().sum();
        Ok(TapeSelection {
            selection: KnowledgeSelection {
                indices,
                step_log_probs,
                terminated_by,
                total_log_prob,
            },
            total,
        })
    }
}

fn validate_target(target: &SelectionTarget, m: usize) -> Result<()> {
    if target.indices.is_empty() {
        return Err(Error::InvalidArgument(
            "selection target must contain at least one sentence".into(),
        ));
    }
    let mut seen = vec![false; m];
    for &j in &target.indices {
        if j >= m {
            return Err(Error::InvalidArgument(format!(
                "target index {j} out of range for {m} candidates"
            )));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::InvalidArgument(format!("target index {j} repeated")));
        }
    }
    if target.terminal && target.indices.len() == m + 1 {
        return Err(Error::InvalidArgument("target longer than the candidate set".into()));
    }
    Ok(())
}

/// Every complete selection over `m` candidates under `t_max`: each
/// non-repeating sequence either ends with the termination step or reaches
/// `t_max` sentences.
pub fn enumerate_selections(m: usize, t_max: usize) -> Vec<SelectionTarget> {
    fn extend(m: usize, t_max: usize, prefix: &mut Vec<usize>, out: &mut Vec<SelectionTarget>) {
        if !prefix.is_empty() {
            out.push(SelectionTarget {
                indices: prefix.clone(),
                terminal: prefix.len() < t_max,
            });
            if prefix.len() == t_max {
                return;
            }
        }
        for j in 0..m {
            if !prefix.contains(&j) {
                prefix.push(j);
                extend(m, t_max, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(m, t_max, &mut Vec::new(), &mut out);
    out
}

fn encode_on_new_tape(
    encoder: &KnowledgeEncoder,
    context: &[Utterance],
    knowledge: &[String],
    tokenizer: &dyn Tokenizer,
    tape: &mut Tape,
) -> Result<Var> {
    let inputs = build_encoder_inputs(context, knowledge, encoder.config.budget, tokenizer)?;
    let bound = tape.bind(&encoder.store);
    Ok(encoder.encode_on_tape(tape, &bound, &[&inputs])?[0])
}

fn check_pair(encoder: &KnowledgeEncoder, selector: &Selector) -> Result<()> {
    if encoder.dim() != selector.input_dim {
        return Err(Error::Shape(format!(
            "encoder width {} does not match selector input {}",
            encoder.dim(),
            selector.input_dim
        )));
    }
    Ok(())
}

/// Greedy or sampled selection for one example. Sampling is deterministic
/// given `seed`.
#[allow(clippy::too_many_arguments)]
pub fn select(
    encoder: &KnowledgeEncoder,
    selector: &Selector,
    context: &[Utterance],
    knowledge: &[String],
    tokenizer: &dyn Tokenizer,
    t_max: usize,
    mode: SelectMode,
    seed: Option<u64>,
) -> Result<KnowledgeSelection> {
    check_pair(encoder, selector)?;
    let mut tape = Tape::new();
    let enc = encode_on_new_tape(encoder, context, knowledge, tokenizer, &mut tape)?;
    let bound = tape.bind(&selector.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let policy = match mode {
        SelectMode::Greedy => Policy::Greedy,
        SelectMode::Sample => Policy::Sample(&mut rng),
    };
    Ok(selector.rollout(&mut tape, &bound, enc, t_max, policy)?.selection)
}

/// Selection over precomputed encodings.
pub fn select_from_encodings(
    selector: &Selector,
    encodings: &KnowledgeEncodings,
    t_max: usize,
    mode: SelectMode,
    seed: Option<u64>,
) -> Result<KnowledgeSelection> {
    check_encodings(selector, encodings)?;
    let mut tape = Tape::new();
    let enc = tape.constant(encodings.vectors.clone());
    let bound = tape.bind(&selector.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let policy = match mode {
        SelectMode::Greedy => Policy::Greedy,
        SelectMode::Sample => Policy::Sample(&mut rng),
    };
    Ok(selector.rollout(&mut tape, &bound, enc, t_max, policy)?.selection)
}

/// Teacher-forced negative log-likelihood of `target`.
pub fn selection_nll(
    encoder: &KnowledgeEncoder,
    selector: &Selector,
    context: &[Utterance],
    knowledge: &[String],
    tokenizer: &dyn Tokenizer,
    target: &SelectionTarget,
) -> Result<f64> {
    check_pair(encoder, selector)?;
    let mut tape = Tape::new();
    let enc = encode_on_new_tape(encoder, context, knowledge, tokenizer, &mut tape)?;
    let bound = tape.bind(&selector.store);
    let run = selector.rollout(&mut tape, &bound, enc, usize::MAX, Policy::Forced(target))?;
    Ok(-run.selection.total_log_prob)
}

/// Teacher-forced NLL over precomputed encodings.
pub fn selection_nll_from_encodings(
    selector: &Selector,
    encodings: &KnowledgeEncodings,
    target: &SelectionTarget,
) -> Result<f64> {
    check_encodings(selector, encodings)?;
    let mut tape = Tape::new();
    let enc = tape.constant(encodings.vectors.clone());
    let bound = tape.bind(&selector.store);
    let run = selector.rollout(&mut tape, &bound, enc, usize::MAX, Policy::Forced(target))?;
    Ok(-run.selection.total_log_prob)
}

/// Teacher-forced NLL of `target` with its gradients with respect to the
/// encoder and selector parameters, each in store order.
pub fn selection_nll_gradients(
    encoder: &KnowledgeEncoder,
    selector: &Selector,
    context: &[Utterance],
    knowledge: &[String],
    tokenizer: &dyn Tokenizer,
    target: &SelectionTarget,
) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
    check_pair(encoder, selector)?;
    let inputs = build_encoder_inputs(context, knowledge, encoder.config.budget, tokenizer)?;
    let mut tape = Tape::new();
    let enc_bound = tape.bind(&encoder.store);
    let enc = encoder.encode_on_tape(&mut tape, &enc_bound, &[&inputs])?[0];
    let sel_bound = tape.bind(&selector.store);
    let total = forced_log_prob(selector, &mut tape, &sel_bound, enc, target)?;
    let nll = tape.scale(total, -1.0);
    let grads = tape.backward(nll);
    Ok((
        tape.scalar(nll),
        grads.for_bound(&enc_bound, &encoder.store),
        grads.for_bound(&sel_bound, &selector.store),
    ))
}

/// Records the teacher-forced log-likelihood of `target` on `tape` and
/// returns the summed log-probability node.
pub(crate) fn forced_log_prob(
    selector: &Selector,
    tape: &mut Tape,
    bound: &Bound,
    encodings: Var,
    target: &SelectionTarget,
) -> Result<Var> {
    Ok(selector
        .rollout(tape, bound, encodings, usize::MAX, Policy::Forced(target))?
        .total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Vocabulary};

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens((0..40).map(|i| format!("w{i}"))).unwrap()
    }

    fn words(range: std::ops::Range<usize>) -> String {
        range.map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn encoder_inputs_without_truncation() {
        let v = vocab();
        let ctx = vec![Utterance::new(Speaker::A, "w1 w2"), Utterance::new(Speaker::B, "w3")];
        let know = vec!["w4 w5".to_string(), "w6".into(), "w7 w8 w9".into()];
        let inputs = build_encoder_inputs(&ctx, &know, 64, &v).unwrap();
        assert_eq!(inputs.len(), 3);
        let id = |w: &str| v.lookup(w).unwrap();
        assert_eq!(
            inputs[0].tokens,
            vec![CLS, id("w1"), id("w2"), id("w3"), SEP, id("w4"), id("w5"), SEP]
        );
        assert_eq!(inputs[0].segment_ids, vec![0, 0, 0, 0, 0, 1, 1, 1]);
        for input in &inputs {
            assert_eq!(&input.tokens[..5], &inputs[0].tokens[..5]);
        }
    }

    #[test]
    fn encoder_inputs_truncate_to_budget() {
        let v = vocab();
        let ctx = vec![
            Utterance::new(Speaker::A, words(0..12)),
            Utterance::new(Speaker::B, words(12..16)),
        ];
        let know = vec![words(20..40), "w1".into()];
        let budget = 16;
        let inputs = build_encoder_inputs(&ctx, &know, budget, &v).unwrap();
        // long sentence: context floor of 4 tokens, the rest for knowledge
        assert_eq!(inputs[0].len(), budget);
        let newest: Vec<TokenId> = v.encode(&words(12..16));
        assert_eq!(&inputs[0].tokens[1..5], &newest[..]);
        assert_eq!(inputs[0].tokens[5], SEP);
        assert_eq!(inputs[0].tokens[6], v.lookup("w20").unwrap());
        // short sentence: context takes everything left
        assert_eq!(inputs[1].len(), budget);
        assert_eq!(&inputs[1].tokens[9..13], &newest[..]);
        for input in &inputs {
            assert_eq!(input.tokens[0], CLS);
            assert_eq!(input.tokens.iter().filter(|&&t| t == SEP).count(), 2);
        }
        assert!(build_encoder_inputs(&ctx, &know, 7, &v).is_err());
    }

    fn tiny_models(seed: u64) -> (KnowledgeEncoder, Selector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = KnowledgeEncoder::new(
            EncoderConfig {
                width: 8,
                heads: 2,
                layers: 1,
                ff_width: 16,
                budget: 32,
            },
            vocab().len(),
            &mut rng,
        )
        .unwrap();
        let sel = Selector::new(SelectorConfig { hidden: 6, layers: 2 }, 8, &mut rng).unwrap();
        (enc, sel)
    }

    fn sample_example() -> (Vec<Utterance>, Vec<String>) {
        (
            vec![Utterance::new(Speaker::A, "w1 w2 w3")],
            vec!["w4 w5".into(), "w6 w7".into(), "w8".into()],
        )
    }

    #[test]
    fn candidate_encodings_append_termination_vector() {
        let (enc, _) = tiny_models(1);
        let (ctx, know) = sample_example();
        let inputs = build_encoder_inputs(&ctx, &know, 32, &vocab()).unwrap();
        let a = encode_candidates(&enc, &inputs).unwrap();
        assert_eq!(a.vectors.nrows(), 4);
        assert_eq!(a, encode_candidates(&enc, &inputs).unwrap());
        let other = build_encoder_inputs(&ctx, &["w9 w10".to_string()], 32, &vocab()).unwrap();
        let b = encode_candidates(&enc, &other).unwrap();
        assert_eq!(a.vectors.row(3), b.vectors.row(1));
        assert_eq!(a.vectors.row(3), enc.termination_embedding().row(0));
        let too_long = vec![EncoderInput {
            tokens: vec![CLS; 33],
            segment_ids: vec![0; 33],
        }];
        assert!(encode_candidates(&enc, &too_long).is_err());
    }

    fn encodings(rows: &[[f64; 2]]) -> KnowledgeEncodings {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        KnowledgeEncodings {
            vectors: Matrix::from_shape_vec((rows.len(), 2), flat).unwrap(),
        }
    }

    fn crafted_selector() -> Selector {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sel = Selector::new(SelectorConfig { hidden: 2, layers: 1 }, 2, &mut rng).unwrap();
        // alpha_i = tanh(e_i[0]) + tanh(e_i[1]), independent of the state
        *sel.store.get_mut(sel.w_e) = Matrix::eye(2);
        sel.store.get_mut(sel.w_s).fill(0.0);
        sel.store.get_mut(sel.v).fill(1.0);
        sel
    }

    #[test]
    fn zero_attention_vector_gives_uniform_distribution() {
        let (_, mut sel) = tiny_models(2);
        sel.store.get_mut(sel.v).fill(0.0);
        let enc = KnowledgeEncodings {
            vectors: normal_matrix(&mut ChaCha8Rng::seed_from_u64(3), 4, 8, 1.0),
        };
        let probs = step_distribution(&sel, &sel.initial_state(), &enc, &[false, true, false, false]).unwrap();
        assert_eq!(probs[1], 0.0);
        for i in [0, 2, 3] {
            assert!((probs[i] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(step_distribution(&sel, &sel.initial_state(), &enc, &[true; 4]).is_err());
        assert!(step_distribution(&sel, &sel.initial_state(), &enc, &[false; 3]).is_err());
    }

    #[test]
    fn crafted_scores_order_the_distribution() {
        let sel = crafted_selector();
        // alpha = [2 tanh(1), 2 tanh(0.5), 2 tanh(0.25)] before e_spe
        let enc = encodings(&[[1.0, 1.0], [0.5, 0.5], [0.25, 0.25], [-3.0, -3.0]]);
        let probs = step_distribution(&sel, &sel.initial_state(), &enc, &[false, false, false, true]).unwrap();
        assert!(probs[0] > probs[1] && probs[1] > probs[2]);
        assert_eq!(probs[3], 0.0);
        let masked = step_distribution(&sel, &sel.initial_state(), &enc, &[false, true, false, true]).unwrap();
        assert_eq!(masked[1], 0.0);
        assert!((masked[0] / masked[2] - probs[0] / probs[2]).abs() < 1e-12);
    }

    #[test]
    fn termination_wins_at_second_step() {
        let sel = crafted_selector();
        // e_spe scores highest but is masked at step one
        let enc = encodings(&[[0.2, 0.1], [1.0, 0.5], [0.0, 0.3], [3.0, 3.0]]);
        let out = select_from_encodings(&sel, &enc, 3, SelectMode::Greedy, None).unwrap();
        assert_eq!(out.indices, vec![1]);
        assert_eq!(out.terminated_by, Termination::TerminationEmbedding);
        assert_eq!(out.step_log_probs.len(), 2);
        // manual evaluation of the two softmax steps
        let alpha: Vec<f64> = [[0.2, 0.1], [1.0, 0.5], [0.0, 0.3], [3.0, 3.0]]
            .iter()
            .map(|e: &[f64; 2]| e[0].tanh() + e[1].tanh())
            .collect();
        let z1: f64 = alpha[..3].iter().map(|a| a.exp()).sum();
        let z2: f64 = [alpha[0], alpha[2], alpha[3]].iter().map(|a| a.exp()).sum();
        assert!((out.step_log_probs[0] - (alpha[1] - z1.ln())).abs() < 1e-12);
        assert!((out.step_log_probs[1] - (alpha[3] - z2.ln())).abs() < 1e-12);
        assert!((out.total_log_prob - out.step_log_probs.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_stops_at_t_max() {
        let (enc, sel) = tiny_models(4);
        let ctx = vec![Utterance::new(Speaker::A, "w1")];
        let out = select(&enc, &sel, &ctx, &["w2".into()], &vocab(), 1, SelectMode::Greedy, None).unwrap();
        assert_eq!(out.indices, vec![0]);
        assert_eq!(out.terminated_by, Termination::TMax);
        assert!(out.step_log_probs[0].abs() < 1e-12);
    }

    #[test]
    fn advance_state_shape_determinism_and_sensitivity() {
        let (_, sel) = tiny_models(5);
        let s0 = sel.initial_state();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s1 = advance_state(&sel, &s0, &a).unwrap();
        assert_eq!(s1.top().dim(), (1, 6));
        assert_eq!(s1, advance_state(&sel, &s0, &a).unwrap());
        assert_ne!(s1.top(), advance_state(&sel, &s0, &b).unwrap().top());
        assert!(advance_state(&sel, &s0, &a[..7]).is_err());
        let default_sel = Selector::new(SelectorConfig::default(), 8, &mut rng).unwrap();
        let s = advance_state(&default_sel, &default_sel.initial_state(), &a).unwrap();
        assert_eq!(s.top().ncols(), 256);
    }

    #[test]
    fn uniform_selector_nll_matches_hand_arithmetic() {
        let (_, mut sel) = tiny_models(7);
        sel.store.get_mut(sel.v).fill(0.0);
        let enc = KnowledgeEncodings {
            vectors: normal_matrix(&mut ChaCha8Rng::seed_from_u64(8), 3, 8, 1.0),
        };
        let target = SelectionTarget {
            indices: vec![0],
            terminal: true,
        };
        // step 1: {0, 1} (termination masked); step 2: {1, e_spe}
        let nll = selection_nll_from_encodings(&sel, &enc, &target).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12, "{nll}");
        let no_term = SelectionTarget {
            indices: vec![1, 0],
            terminal: false,
        };
        // step 1: {0, 1}; step 2: {0, e_spe}
        let nll = selection_nll_from_encodings(&sel, &enc, &no_term).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-12, "{nll}");
    }

    #[test]
    fn nll_matches_replayed_selection() {
        let (enc, sel) = tiny_models(9);
        let (ctx, know) = sample_example();
        let v = vocab();
        for seed in 0..5 {
            let out = select(&enc, &sel, &ctx, &know, &v, 3, SelectMode::Sample, Some(seed)).unwrap();
            let target = SelectionTarget {
                indices: out.indices.clone(),
                terminal: out.terminated_by == Termination::TerminationEmbedding,
            };
            let nll = selection_nll(&enc, &sel, &ctx, &know, &v, &target).unwrap();
            assert!((nll + out.total_log_prob).abs() < 1e-12);
            let again = select(&enc, &sel, &ctx, &know, &v, 3, SelectMode::Sample, Some(seed)).unwrap();
            assert_eq!(out, again);
        }
    }

    #[test]
    fn certain_steps_have_zero_nll() {
        let (_, sel) = tiny_models(10);
        let enc = KnowledgeEncodings {
            vectors: normal_matrix(&mut ChaCha8Rng::seed_from_u64(11), 2, 8, 1.0),
        };
        // one candidate then forced termination: both steps have one option
        let target = SelectionTarget {
            indices: vec![0],
            terminal: true,
        };
        assert!(selection_nll_from_encodings(&sel, &enc, &target).unwrap().abs() < 1e-12);
    }

    #[test]
    fn invalid_targets_are_rejected() {
        let (_, sel) = tiny_models(12);
        let enc = KnowledgeEncodings {
            vectors: normal_matrix(&mut ChaCha8Rng::seed_from_u64(13), 3, 8, 1.0),
        };
        for target in [
            SelectionTarget { indices: vec![2], terminal: false },
            SelectionTarget { indices: vec![0, 0], terminal: false },
            SelectionTarget { indices: vec![], terminal: true },
        ] {
            assert!(selection_nll_from_encodings(&sel, &enc, &target).is_err());
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn selection_probabilities_sum_to_one(seed in 0u64..1000, m in 1usize..4, t_max in 1usize..4) {
            let (_, sel) = tiny_models(seed);
            let enc = KnowledgeEncodings {
                vectors: normal_matrix(&mut ChaCha8Rng::seed_from_u64(seed + 1), m + 1, 8, 1.0),
            };
            let total: f64 = enumerate_selections(m, t_max)
                .iter()
                .map(|t| (-selection_nll_from_encodings(&sel, &enc, t).unwrap()).exp())
                .sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-9, "{}", total);
        }

        #[test]
        fn greedy_picks_the_most_probable_sentence(seed in 0u64..1000) {
            let (_, sel) = tiny_models(seed);
            let enc = KnowledgeEncodings {
                vectors: normal_matrix(&mut ChaCha8Rng::seed_from_u64(seed), 4, 8, 1.0),
            };
            let out = select_from_encodings(&sel, &enc, 1, SelectMode::Greedy, None).unwrap();
            let probs = step_distribution(&sel, &sel.initial_state(), &enc, &[false, false, false, true]).unwrap();
            let best = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert_eq!(probs[out.indices[0]], best);
        }
    }

    #[test]
    fn forced_nll_gradients_match_finite_differences() {
        let (enc, sel) = tiny_models(14);
        let (ctx, know) = sample_example();
        let v = vocab();
        let target = SelectionTarget { indices: vec![2, 0], terminal: true };
        let inputs = build_encoder_inputs(&ctx, &know, 32, &v).unwrap();
        let loss = |enc: &KnowledgeEncoder, sel: &Selector| -> (f64, Vec<Matrix>, Vec<Matrix>) {
            let mut tape = Tape::new();
            let eb = tape.bind(&enc.store);
            let e = enc.encode_on_tape(&mut tape, &eb, &[&inputs]).unwrap()[0];
            let sb = tape.bind(&sel.store);
            let lp = forced_log_prob(sel, &mut tape, &sb, e, &target).unwrap();
            let nll = tape.scale(lp, -1.0);
            let g = tape.backward(nll);
            (tape.scalar(nll), g.for_bound(&eb, &enc.store), g.for_bound(&sb, &sel.store))
        };
        let (_, enc_grads, sel_grads) = loss(&enc, &sel);
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let err = (analytic - numeric).abs();
            assert!(err < 1e-8 || err / denom < 1e-4, "{analytic} vs {numeric}");
        };
        for p in 0..sel.store.len() {
            for k in 0..sel.store.get(p).len().min(5) {
                let mut a = sel.clone();
                a.store.get_mut(p).iter_mut().nth(k).into_iter().for_each(|x| *x += h);
                let mut b = sel.clone();
                b.store.get_mut(p).iter_mut().nth(k).into_iter().for_each(|x| *x -= h);
                check(sel_grads[p].iter().nth(k).copied().unwrap(), loss(&enc, &a).0, loss(&enc, &b).0);
            }
        }
        for p in 0..enc.store.len() {
            for k in 0..enc.store.get(p).len().min(3) {
                let mut a = enc.clone();
                a.store.get_mut(p).iter_mut().nth(k).into_iter().for_each(|x| *x += h);
                let mut b = enc.clone();
                b.store.get_mut(p).iter_mut().nth(k).into_iter().for_each(|x| *x -= h);
                check(enc_grads[p].iter().nth(k).copied().unwrap(), loss(&a, &sel).0, loss(&b, &sel).0);
            }
        }
    }
}
