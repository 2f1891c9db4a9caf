//! Warm-up on pseudo labels followed by joint optimisation.
//!
//! Each joint step samples one mini-batch and runs
//!
//! 1. a reinforcement step: sample a selection per example, generate
//!    greedily from it, use unigram F1 against the gold response as reward
//!    and update the encoder and selector with `-mean((R - b) log P)`,
//!    where `b` is the batch-mean reward;
//! 2. a curriculum step: per example draw `z ~ Bernoulli(p)` with
//!    `p = p0 exp(-lambda m)` and train the generator on the pseudo label
//!    when `z = 1`, on the selector's greedy choice otherwise.
//!
//! Every random draw comes from a generator keyed by `(seed, step,
//! purpose)`, so a run resumed from a checkpoint follows the same
//! trajectory as an uninterrupted one.

use rand::distributions::{Bernoulli, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape};
use crate::corpus::{Corpus, Example, Tokenizer, TokenId};
use crate::error::{Error, Result};
use crate::generation::{
    assemble_input, generate, response_nll, response_targets, AssembledInput, Generator, GeneratorConfig,
};
use crate::metrics::{perplexity, unigram_f1};
use crate::nn::{clip_grad_norm, Adam};
use crate::pseudo::{PseudoLabel, WarmupCorpora};
use crate::selection::{
    build_encoder_inputs, enumerate_selections, forced_log_prob, EncoderConfig, KnowledgeEncoder,
    KnowledgeEncodings, KnowledgeSelection, Policy, SelectionTarget, Selector, SelectorConfig,
};

const PURPOSE_BATCH: u64 = 0;
const PURPOSE_SAMPLE: u64 = 1;
const PURPOSE_CURRICULUM: u64 = 2;
const PURPOSE_WARMUP: u64 = 3;

/// Random stream for one purpose at one step.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(16).wrapping_add(purpose));
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub p0: f64,
    pub lambda: f64,
    pub max_steps: u64,
    pub t_max: usize,
    pub warmup_steps: u64,
    pub warmup_batch: usize,
    pub joint_batch: usize,
    pub lr_selector: f64,
    pub lr_generator: f64,
    /// Ablation switches; all on for the full method.
    pub pseudo: bool,
    pub joint: bool,
    pub reinforcement: bool,
    pub curriculum: bool,
    /// Keep the encoder out of the reinforcement update.
    pub freeze_encoder: bool,
    pub validation_every: u64,
    pub patience: usize,
    /// Global gradient-norm cap per update, off when `None`.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p0: 1.0,
            lambda: 1e-5,
            max_steps: 10_000,
            t_max: 1,
            warmup_steps: 1000,
            warmup_batch: 64,
            joint_batch: 128,
            lr_selector: 5e-6,
            lr_generator: 5e-5,
            pseudo: true,
            joint: true,
            reinforcement: true,
            curriculum: true,
            freeze_encoder: false,
            validation_every: 500,
            patience: 3,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small-batch, high learning-rate settings for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            lambda: 1e-3,
            max_steps: 2000,
            warmup_steps: 300,
            warmup_batch: 16,
            joint_batch: 8,
            lr_selector: 1e-3,
            lr_generator: 1e-3,
            max_grad_norm: Some(5.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(Error::Config(format!("p0 must lie in (0, 1], got {}", self.p0)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.warmup_batch == 0 || self.joint_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr_selector > 0.0 && self.lr_generator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.validation_every == 0 {
            return Err(Error::Config("validation_every must be positive".into()));
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub selector: SelectorConfig,
    pub generator: GeneratorConfig,
    /// Tokens reserved for the response; also the decoding length limit.
    pub response_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            selector: SelectorConfig::default(),
            generator: GeneratorConfig::default(),
            response_budget: 64,
        }
    }
}

impl ModelConfig {
    /// Width-64 models sized for short synthetic dialogues.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                width: 64,
                heads: 4,
                layers: 1,
                ff_width: 128,
                budget: 64,
            },
            selector: SelectorConfig { hidden: 64, layers: 1 },
            generator: GeneratorConfig {
                width: 64,
                heads: 4,
                layers: 2,
                ff_width: 128,
                capacity: 128,
            },
            response_budget: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.response_budget == 0 {
            return Err(Error::Config("response_budget must be positive".into()));
        }
        if self.generator.capacity < self.response_budget + crate::generation::MIN_INPUT_ROOM {
            return Err(Error::Config(format!(
                "generator capacity {} leaves too little input room after a response budget of {}",
                self.generator.capacity, self.response_budget
            )));
        }
        Ok(())
    }
}

/// Encoder, selector and generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub encoder: KnowledgeEncoder,
    pub selector: Selector,
    pub generator: Generator,
}

impl Models {
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = KnowledgeEncoder::new(config.encoder, vocab_size, &mut rng)?;
        let selector = Selector::new(config.selector, encoder.dim(), &mut rng)?;
        let generator = Generator::new(config.generator, vocab_size, &mut rng)?;
        Ok(Self {
            encoder,
            selector,
            generator,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.encoder.store.all_finite() && self.selector.store.all_finite() && self.generator.store.all_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub encoder: Adam,
    pub selector: Adam,
    pub generator: Adam,
}

impl Optimizers {
    pub fn new(models: &Models) -> Self {
        Self {
            encoder: Adam::new(&models.encoder.store, 0.9, 0.999),
            selector: Adam::new(&models.selector.store, 0.9, 0.999),
            generator: Adam::new(&models.generator.store, 0.9, 0.999),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed joint steps `m`.
    pub step: u64,
    /// Curriculum rate at `step`.
    pub p: f64,
    pub warmup_step: u64,
    pub best_validation_ppl: Option<f64>,
    /// Validation rounds since the last improvement.
    pub bad_rounds: usize,
    /// Multiplier on both learning rates, halved on plateaus.
    pub lr_scale: f64,
    pub stopped_early: bool,
    pub optimizers: Optimizers,
}

impl TrainState {
    pub fn new(models: &Models, config: &TrainConfig) -> Self {
        Self {
            step: 0,
            p: config.p0,
            warmup_step: 0,
            best_validation_ppl: None,
            bad_rounds: 0,
            lr_scale: 1.0,
            stopped_early: false,
            optimizers: Optimizers::new(models),
        }
    }
}

/// `p0 exp(-lambda m)`.
pub fn curriculum_rate(p0: f64, lambda: f64, m: u64) -> Result<f64> {
    if !(p0 > 0.0 && p0 <= 1.0) {
        return Err(Error::InvalidArgument(format!("p0 must lie in (0, 1], got {p0}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(p0 * (-lambda * m as f64).exp())
}

/// Reinforcement-step outcome for one mini-batch.
/// The rate `p` at joint step `step` and `n` per-example draws
/// `z ~ Bernoulli(p)`, exactly as the curriculum step makes them.
pub fn curriculum_draws(config: &TrainConfig, step: u64, n: usize) -> Result<(f64, Vec<bool>)> {
    let p = curriculum_rate(config.p0, config.lambda, step)?;
    let mut rng = step_rng(config.seed, step, PURPOSE_CURRICULUM);
    let coin = Bernoulli::new(p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((p, (0..n).map(|_| coin.sample(&mut rng)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceBatch {
    pub selections: Vec<KnowledgeSelection>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
    pub loss: f64,
}

/// Curriculum-step outcome for one mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumBatch {
    pub p: f64,
    pub z: Vec<bool>,
    /// Knowledge indices the generator was trained on, per example.
    pub knowledge: Vec<Vec<usize>>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub step: u64,
    pub selector_nll: f64,
    pub generator_nll: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L_K")]
    pub l_k: Option<f64>,
    #[serde(rename = "L_G")]
    pub l_g: Option<f64>,
    pub p: f64,
    pub mean_reward: Option<f64>,
    pub validation_ppl: Option<f64>,
}

/// Selector warm-up target: the first `t_max` pseudo-label sentences, with
/// the termination step when the label is shorter than `t_max`.
pub fn warmup_target(label: &PseudoLabel, t_max: usize) -> SelectionTarget {
    SelectionTarget {
        indices: label.selected_capped(t_max).to_vec(),
        terminal: label.m_bar < t_max,
    }
}

fn sentences(example: &Example, indices: &[usize]) -> Vec<String> {
    indices.iter().map(|&i| example.knowledge[i].clone()).collect()
}

/// Batch indices for a step: everything when the batch covers the corpus,
/// otherwise a sorted sample without replacement.
fn sample_batch(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// Models, optimiser state and configuration for one training run.
pub struct Trainer<'a> {
    pub models: Models,
    pub state: TrainState,
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub tokenizer: &'a dyn Tokenizer,
}

impl<'a> Trainer<'a> {
    pub fn new(models: Models, config: TrainConfig, model_config: ModelConfig, tokenizer: &'a dyn Tokenizer) -> Result<Self> {
        config.validate()?;
        model_config.validate()?;
        let state = TrainState::new(&models, &config);
        Ok(Self {
            models,
            state,
            config,
            model_config,
            tokenizer,
        })
    }

    fn capacity(&self) -> usize {
        self.models.generator.config.capacity
    }

    fn assemble(&self, example: &Example, knowledge: &[String]) -> Result<AssembledInput> {
        assemble_input(
            &example.context,
            knowledge,
            self.capacity(),
            self.model_config.response_budget,
            self.tokenizer,
        )
    }

    /// Gold targets clipped so input plus response fits the capacity.
    fn targets(&self, input: &AssembledInput, response: &str) -> Vec<TokenId> {
        let mut targets = response_targets(self.tokenizer, response);
        targets.truncate(self.capacity() + 1 - input.len());
        targets
    }

    fn encoder_inputs(&self, examples: &[&Example]) -> Result<Vec<Vec<crate::selection::EncoderInput>>> {
        examples
            .iter()
            .map(|ex| build_encoder_inputs(&ex.context, &ex.knowledge, self.models.encoder.config.budget, self.tokenizer))
            .collect()
    }

    fn update_selection(&mut self, enc_grads: Option<Vec<Matrix>>, mut sel_grads: Vec<Matrix>) {
        let lr = self.config.lr_selector * self.state.lr_scale;
        if let Some(mut enc_grads) = enc_grads {
            if let Some(max) = self.config.max_grad_norm {
                clip_grad_norm(&mut enc_grads, max);
            }
            self.state.optimizers.encoder.step(&mut self.models.encoder.store, &enc_grads, lr);
        }
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut sel_grads, max);
        }
        self.state.optimizers.selector.step(&mut self.models.selector.store, &sel_grads, lr);
    }

    fn update_generator(&mut self, mut grads: Vec<Matrix>) {
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.config.lr_generator * self.state.lr_scale;
        self.state.optimizers.generator.step(&mut self.models.generator.store, &grads, lr);
    }

    /// Greedy selections for a batch, without gradients.
    pub fn greedy_selections(&self, examples: &[&Example], t_max: usize) -> Result<Vec<KnowledgeSelection>> {
        let inputs = self.encoder_inputs(examples)?;
        let refs: Vec<&[_]> = inputs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let eb = tape.bind(&self.models.encoder.store);
        let encodings = self.models.encoder.encode_on_tape(&mut tape, &eb, &refs)?;
        let sb = tape.bind(&self.models.selector.store);
        encodings
            .into_iter()
            .map(|enc| Ok(self.models.selector.rollout(&mut tape, &sb, enc, t_max, Policy::Greedy)?.selection))
            .collect()
    }

    /// Token-mean response NLL over a batch and its generator gradients.
    fn generator_loss(&self, items: &[(AssembledInput, Vec<TokenId>)]) -> Result<(f64, Vec<Matrix>)> {
        let refs: Vec<(&AssembledInput, &[TokenId])> = items.iter().map(|(i, t)| (i, t.as_slice())).collect();
        let mut tape = Tape::new();
        let bound = tape.bind(&self.models.generator.store);
        let (nll, scored) = self.models.generator.nll_on_tape(&mut tape, &bound, &refs)?;
        let total = tape.sum(nll);
        let loss = tape.scale(total, 1.0 / scored.max(1) as f64);
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), grads.for_bound(&bound, &self.models.generator.store)))
    }

    /// One maximum-likelihood update of selector and generator on pseudo
    /// labels.
    pub fn warmup_step(&mut self, batch: &[(&Example, &PseudoLabel)]) -> Result<WarmupRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty warm-up batch".into()));
        }
        let t_max = self.config.t_max;
        let examples: Vec<&Example> = batch.iter().map(|(e, _)| *e).collect();
        let inputs = self.encoder_inputs(&examples)?;
        let refs: Vec<&[_]> = inputs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let eb = tape.bind(&self.models.encoder.store);
        let encodings = self.models.encoder.encode_on_tape(&mut tape, &eb, &refs)?;
        let sb = tape.bind(&self.models.selector.store);
        let mut terms = Vec::with_capacity(batch.len());
        for (enc, (_, label)) in encodings.into_iter().zip(batch) {
            let lp = forced_log_prob(&self.models.selector, &mut tape, &sb, enc, &warmup_target(label, t_max))?;
            terms.push((lp, -1.0 / batch.len() as f64));
        }
        let sel_loss = tape.weighted_sum(&terms);
        let grads = tape.backward(sel_loss);
        let selector_nll = tape.scalar(sel_loss);
        let enc_grads = grads.for_bound(&eb, &self.models.encoder.store);
        let sel_grads = grads.for_bound(&sb, &self.models.selector.store);
        drop(tape);

        let items = batch
            .iter()
            .map(|(ex, label)| {
                let input = self.assemble(ex, &sentences(ex, label.selected_capped(t_max)))?;
                let targets = self.targets(&input, &ex.response);
                Ok((input, targets))
            })
            .collect::<Result<Vec<_>>>()?;
        let (generator_nll, gen_grads) = self.generator_loss(&items)?;

        self.update_selection(Some(enc_grads), sel_grads);
        self.update_generator(gen_grads);
        self.state.warmup_step += 1;
        Ok(WarmupRecord {
            step: self.state.warmup_step,
            selector_nll,
            generator_nll,
        })
    }

    /// Runs the remaining warm-up steps; a no-op when the pseudo ablation
    /// switch is off.
    pub fn warmup(&mut self, corpora: &WarmupCorpora) -> Result<Vec<WarmupRecord>> {
        self.config.validate()?;
        if !self.config.pseudo {
            return Ok(Vec::new());
        }
        if corpora.is_empty() && self.state.warmup_step < self.config.warmup_steps {
            return Err(Error::InvalidArgument("empty warm-up corpus".into()));
        }
        let mut records = Vec::new();
        while self.state.warmup_step < self.config.warmup_steps {
            let mut rng = step_rng(self.config.seed, self.state.warmup_step, PURPOSE_WARMUP);
            let idx = sample_batch(corpora.len(), self.config.warmup_batch, &mut rng);
            let batch: Vec<(&Example, &PseudoLabel)> = idx
                .iter()
                .map(|&i| (&corpora.selector_corpus[i].0, &corpora.selector_corpus[i].1))
                .collect();
            let record = self.warmup_step(&batch)?;
            log::debug!(
                "warm-up {}: selector nll {:.4}, generator nll {:.4}",
                record.step,
                record.selector_nll,
                record.generator_nll
            );
            records.push(record);
        }
        Ok(records)
    }

    /// Policy-gradient loss and gradients for a batch, without updating.
    /// Returns encoder and selector gradients in store order.
    pub fn reinforce_gradients(
        &self,
        batch: &[&Example],
        rng: &mut ChaCha8Rng,
    ) -> Result<(ReinforceBatch, Vec<Matrix>, Vec<Matrix>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty reinforcement batch".into()));
        }
        let inputs = self.encoder_inputs(batch)?;
        let refs: Vec<&[_]> = inputs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let eb = tape.bind(&self.models.encoder.store);
        let encodings = self.models.encoder.encode_on_tape(&mut tape, &eb, &refs)?;
        let sb = tape.bind(&self.models.selector.store);
        let mut selections = Vec::with_capacity(batch.len());
        let mut totals = Vec::with_capacity(batch.len());
        let mut rewards = Vec::with_capacity(batch.len());
        for (enc, ex) in encodings.into_iter().zip(batch) {
            let run = self
                .models
                .selector
                .rollout(&mut tape, &sb, enc, self.config.t_max, Policy::Sample(rng))?;
            let input = self.assemble(ex, &sentences(ex, &run.selection.indices))?;
            let out = generate(&self.models.generator, &input, self.model_config.response_budget, self.tokenizer)?;
            rewards.push(unigram_f1(&out.text, &ex.response));
            totals.push(run.total);
            selections.push(run.selection);
        }
        let n = batch.len() as f64;
        let baseline = rewards.iter().sum::<f64>() / n;
        let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        let terms: Vec<_> = totals.iter().zip(&advantages).map(|(&t, &a)| (t, -a / n)).collect();
        let loss = tape.weighted_sum(&terms);
        let grads = tape.backward(loss);
        let enc_grads = grads.for_bound(&eb, &self.models.encoder.store);
        let sel_grads = grads.for_bound(&sb, &self.models.selector.store);
        Ok((
            ReinforceBatch {
                selections,
                rewards,
                baseline,
                advantages,
                loss: tape.scalar(loss),
            },
            enc_grads,
            sel_grads,
        ))
    }

    /// Reinforcement step at joint step `step`.
    pub fn reinforce_step(&mut self, batch: &[&Example], step: u64) -> Result<ReinforceBatch> {
        let mut rng = step_rng(self.config.seed, step, PURPOSE_SAMPLE);
        let (out, enc_grads, sel_grads) = self.reinforce_gradients(batch, &mut rng)?;
        let enc_grads = (!self.config.freeze_encoder).then_some(enc_grads);
        self.update_selection(enc_grads, sel_grads);
        Ok(out)
    }

    /// Curriculum step at joint step `step`, using `p` for that step.
    pub fn curriculum_step(&mut self, batch: &[(&Example, &PseudoLabel)], step: u64) -> Result<CurriculumBatch> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty curriculum batch".into()));
        }
        let t_max = self.config.t_max;
        let (p, z) = curriculum_draws(&self.config, step, batch.len())?;
        let need_selector: Vec<&Example> = batch
            .iter()
            .zip(&z)
            .filter(|(_, &z)| !z)
            .map(|((ex, _), _)| *ex)
            .collect();
        let mut chosen = if need_selector.is_empty() {
            Vec::new()
        } else {
            self.greedy_selections(&need_selector, t_max)?
        }
        .into_iter();
        let knowledge: Vec<Vec<usize>> = batch
            .iter()
            .zip(&z)
            .map(|((_, label), &z)| {
                if z {
                    label.selected_capped(t_max).to_vec()
                } else {
                    chosen.next().expect("one selection per z = 0").indices
                }
            })
            .collect();
        let items = batch
            .iter()
            .zip(&knowledge)
            .map(|((ex, _), k)| {
                let input = self.assemble(ex, &sentences(ex, k))?;
                let targets = self.targets(&input, &ex.response);
                Ok((input, targets))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = self.generator_loss(&items)?;
        self.update_generator(grads);
        Ok(CurriculumBatch { p, z, knowledge, loss })
    }

    /// Perplexity of gold responses given greedily selected knowledge.
    pub fn validation_ppl(&self, corpus: &Corpus) -> Result<f64> {
        let mut nlls = Vec::new();
        for chunk in corpus.examples.chunks(32) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let selections = self.greedy_selections(&refs, self.config.t_max)?;
            for (ex, sel) in chunk.iter().zip(selections) {
                let input = self.assemble(ex, &sentences(ex, &sel.indices))?;
                let targets = self.targets(&input, &ex.response);
                nlls.extend(response_nll(&self.models.generator, &input, &targets)?);
            }
        }
        perplexity(&nlls)
    }

    /// Joint optimisation from the current step to `max_steps`.
    ///
    /// `on_validation` runs after every validation round with whether the
    /// round set a new best perplexity.
    pub fn joint_train(
        &mut self,
        corpus: &Corpus,
        labels: &[PseudoLabel],
        validation: Option<&Corpus>,
        on_validation: &mut dyn FnMut(&Trainer<'_>, &StepRecord, bool) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        self.config.validate()?;
        if !self.config.joint {
            if self.config.max_steps > 0 {
                log::warn!("joint training is switched off; skipping {} steps", self.config.max_steps);
            }
            return Ok(Vec::new());
        }
        if labels.len() != corpus.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pseudo labels for {} examples",
                labels.len(),
                corpus.len()
            )));
        }
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty training corpus".into()));
        }
        let mut records = Vec::new();
        while self.state.step < self.config.max_steps && !self.state.stopped_early {
            let step = self.state.step + 1;
            let mut rng = step_rng(self.config.seed, step, PURPOSE_BATCH);
            let idx = sample_batch(corpus.len(), self.config.joint_batch, &mut rng);
            let examples: Vec<&Example> = idx.iter().map(|&i| &corpus.examples[i]).collect();
            let reinforce = if self.config.reinforcement {
                Some(self.reinforce_step(&examples, step)?)
            } else {
                None
            };
            let curriculum = if self.config.curriculum {
                let batch: Vec<(&Example, &PseudoLabel)> =
                    idx.iter().map(|&i| (&corpus.examples[i], &labels[i])).collect();
                Some(self.curriculum_step(&batch, step)?)
            } else {
                None
            };
            self.state.step = step;
            self.state.p = curriculum_rate(self.config.p0, self.config.lambda, step)?;
            let mut record = StepRecord {
                step,
                l_k: reinforce.as_ref().map(|r| r.loss),
                l_g: curriculum.as_ref().map(|c| c.loss),
                p: self.state.p,
                mean_reward: reinforce.as_ref().map(|r| r.baseline),
                validation_ppl: None,
            };
            if step % self.config.validation_every == 0 {
                let mut is_best = false;
                if let Some(valid) = validation {
                    let ppl = self.validation_ppl(valid)?;
                    record.validation_ppl = Some(ppl);
                    is_best = self.state.best_validation_ppl.map_or(true, |best| ppl < best);
                    if is_best {
                        self.state.best_validation_ppl = Some(ppl);
                        self.state.bad_rounds = 0;
                    } else {
                        self.state.bad_rounds += 1;
                        self.state.lr_scale *= 0.5;
                        if self.state.bad_rounds >= self.config.patience {
                            self.state.stopped_early = true;
                        }
                    }
                }
                on_validation(self, &record, is_best)?;
            }
            log::debug!("step {step}: {record:?}");
            records.push(record);
        }
        Ok(records)
    }
}

/// Exact expected reward `sum P(seq) R(seq)` over every selection.
pub fn expected_reward(
    selector: &Selector,
    encodings: &KnowledgeEncodings,
    t_max: usize,
    reward: &dyn Fn(&SelectionTarget) -> f64,
) -> Result<f64> {
    enumerate_selections(encodings.candidates(), t_max)
        .iter()
        .map(|seq| {
            let nll = crate::selection::selection_nll_from_encodings(selector, encodings, seq)?;
            Ok((-nll).exp() * reward(seq))
        })
        .sum()
}

/// Exact score-function gradient `sum P(seq) (R(seq) - b) grad log P(seq)`
/// with respect to the selector parameters.
pub fn score_function_gradient(
    selector: &Selector,
    encodings: &KnowledgeEncodings,
    t_max: usize,
    reward: &dyn Fn(&SelectionTarget) -> f64,
    baseline: f64,
) -> Result<Vec<Matrix>> {
    let mut total: Vec<Matrix> = selector.store.values().iter().map(|v| Matrix::zeros(v.dim())).collect();
    for seq in enumerate_selections(encodings.candidates(), t_max) {
        let mut tape = Tape::new();
        let enc = tape.constant(encodings.vectors.clone());
        let bound = tape.bind(&selector.store);
        let lp = forced_log_prob(selector, &mut tape, &bound, enc, &seq)?;
        let weight = tape.scalar(lp).exp() * (reward(&seq) - baseline);
        let grads = tape.backward(lp).for_bound(&bound, &selector.store);
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.scaled_add(weight, &g);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::pseudo::build_warmup_corpora;
    use crate::synthetic::{toy_corpus, ToySpec};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                width: 16,
                heads: 2,
                layers: 1,
                ff_width: 32,
                budget: 32,
            },
            selector: SelectorConfig { hidden: 16, layers: 1 },
            generator: GeneratorConfig {
                width: 16,
                heads: 2,
                layers: 1,
                ff_width: 32,
                capacity: 64,
            },
            response_budget: 16,
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            max_steps: 2,
            warmup_steps: 3,
            warmup_batch: 4,
            joint_batch: 4,
            lr_selector: 1e-3,
            lr_generator: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn curriculum_rate_values() {
        assert_eq!(curriculum_rate(0.7, 0.0, 12345).unwrap(), 0.7);
        assert_eq!(curriculum_rate(0.7, 1e-3, 0).unwrap(), 0.7);
        let p = curriculum_rate(1.0, 1e-5, 1000).unwrap();
        assert!((p - 0.990_049_833_749_168).abs() < 1e-12);
        assert!(curriculum_rate(0.0, 1e-5, 1).is_err());
        assert!(curriculum_rate(1.5, 1e-5, 1).is_err());
        assert!(curriculum_rate(1.0, -1.0, 1).is_err());
        let mut prev = 1.0;
        for m in 0..2000 {
            let p = curriculum_rate(1.0, 1e-3, m).unwrap();
            assert!(p <= prev);
            prev = p;
        }
    }

    #[test]
    fn warmup_target_caps_and_terminates() {
        let label = PseudoLabel {
            ranked_indices: vec![2, 0, 1],
            scores: vec![0.9, 0.5, 0.1],
            m_bar: 2,
        };
        assert_eq!(warmup_target(&label, 1), SelectionTarget { indices: vec![2], terminal: false });
        assert_eq!(warmup_target(&label, 2), SelectionTarget { indices: vec![2, 0], terminal: false });
        assert_eq!(warmup_target(&label, 3), SelectionTarget { indices: vec![2, 0], terminal: true });
    }

    fn setup() -> (Corpus, crate::corpus::Vocabulary) {
        let corpus = toy_corpus(ToySpec {
            examples: 6,
            knowledge_per_example: 3,
            seed: 1,
        });
        let vocab = build_vocabulary(&corpus, 200).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn warmup_noops_and_flag_contracts() {
        let (corpus, vocab) = setup();
        let corpora = build_warmup_corpora(&corpus).unwrap();
        let models = Models::new(&tiny_model_config(), vocab.len(), 3).unwrap();
        let mut cfg = tiny_train_config();
        cfg.warmup_steps = 0;
        let mut trainer = Trainer::new(models.clone(), cfg.clone(), tiny_model_config(), &vocab).unwrap();
        assert!(trainer.warmup(&corpora).unwrap().is_empty());
        assert_eq!(trainer.models, models);
        cfg.warmup_steps = 3;
        cfg.pseudo = false;
        let mut trainer = Trainer::new(models.clone(), cfg.clone(), tiny_model_config(), &vocab).unwrap();
        assert!(trainer.warmup(&corpora).unwrap().is_empty());
        assert_eq!(trainer.models, models);
        cfg.pseudo = true;
        let mut trainer = Trainer::new(models.clone(), cfg, tiny_model_config(), &vocab).unwrap();
        assert_eq!(trainer.warmup(&corpora).unwrap().len(), 3);
        assert_ne!(trainer.models, models);
        assert!(trainer.models.all_finite());
    }

    #[test]
    fn invalid_config_rejected_before_updates() {
        let (_, vocab) = setup();
        let models = Models::new(&tiny_model_config(), vocab.len(), 3).unwrap();
        let cfg = TrainConfig {
            p0: 0.0,
            ..tiny_train_config()
        };
        assert!(Trainer::new(models, cfg, tiny_model_config(), &vocab).is_err());
    }

    #[test]
    fn joint_smoke_run_accounting_and_determinism() {
        let (corpus, vocab) = setup();
        let corpora = build_warmup_corpora(&corpus).unwrap();
        let labels = corpora.labels();
        let run = || {
            let models = Models::new(&tiny_model_config(), vocab.len(), 3).unwrap();
            let mut trainer = Trainer::new(models, tiny_train_config(), tiny_model_config(), &vocab).unwrap();
            trainer.warmup(&corpora).unwrap();
            let records = trainer.joint_train(&corpus, &labels, None, &mut |_, _, _| Ok(())).unwrap();
            (trainer.models.clone(), trainer.state.clone(), records)
        };
        let (models, state, records) = run();
        assert_eq!(state.step, 2);
        assert!((state.p - (-2.0 * 1e-5f64).exp()).abs() < 1e-15);
        assert_eq!(records.len(), 2);
        for r in &records {
            assert!(r.l_k.is_some() && r.l_g.is_some() && r.mean_reward.is_some());
        }
        let (models2, state2, records2) = run();
        assert_eq!(models, models2);
        assert_eq!(state, state2);
        assert_eq!(records, records2);
    }

    #[test]
    fn joint_off_keeps_warmup_output() {
        let (corpus, vocab) = setup();
        let corpora = build_warmup_corpora(&corpus).unwrap();
        let models = Models::new(&tiny_model_config(), vocab.len(), 4).unwrap();
        let cfg = TrainConfig {
            joint: false,
            ..tiny_train_config()
        };
        let mut trainer = Trainer::new(models, cfg, tiny_model_config(), &vocab).unwrap();
        trainer.warmup(&corpora).unwrap();
        let after_warmup = trainer.models.clone();
        let records = trainer
            .joint_train(&corpus, &corpora.labels(), None, &mut |_, _, _| Ok(()))
            .unwrap();
        assert!(records.is_empty());
        assert_eq!(trainer.models, after_warmup);
    }

    #[test]
    fn reinforce_advantages_are_centred() {
        let (corpus, vocab) = setup();
        let models = Models::new(&tiny_model_config(), vocab.len(), 5).unwrap();
        let trainer = Trainer::new(models, tiny_train_config(), tiny_model_config(), &vocab).unwrap();
        let batch: Vec<&Example> = corpus.examples.iter().collect();
        let mut rng = step_rng(0, 1, PURPOSE_SAMPLE);
        let (out, _, _) = trainer.reinforce_gradients(&batch, &mut rng).unwrap();
        assert!(out.advantages.iter().sum::<f64>().abs() < 1e-9);
        assert!(out.rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(trainer.reinforce_gradients(&[], &mut rng).is_err());
    }

    #[test]
    fn curriculum_extremes_use_one_source() {
        let (corpus, vocab) = setup();
        let corpora = build_warmup_corpora(&corpus).unwrap();
        let batch: Vec<(&Example, &PseudoLabel)> = corpora.selector_corpus.iter().map(|(e, l)| (e, l)).collect();
        let models = Models::new(&tiny_model_config(), vocab.len(), 6).unwrap();
        let mut trainer = Trainer::new(models, tiny_train_config(), tiny_model_config(), &vocab).unwrap();
        let out = trainer.curriculum_step(&batch, 1).unwrap();
        assert!(out.z.iter().all(|&z| z));
        for ((_, label), k) in batch.iter().zip(&out.knowledge) {
            assert_eq!(k.as_slice(), label.selected_capped(1));
        }
        // lambda large enough that p underflows to zero
        trainer.config.lambda = 1e4;
        let refs: Vec<&Example> = batch.iter().map(|(e, _)| *e).collect();
        let greedy = trainer.greedy_selections(&refs, 1).unwrap();
        let out = trainer.curriculum_step(&batch, 1000).unwrap();
        assert_eq!(out.p, 0.0);
        assert!(out.z.iter().all(|&z| !z));
        for (sel, k) in greedy.iter().zip(&out.knowledge) {
            assert_eq!(&sel.indices, k);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rate_is_monotone_and_exact(p0 in 0.01f64..=1.0, lambda in 0.0f64..1e-2, m in 0u64..100_000) {
                let p = curriculum_rate(p0, lambda, m).unwrap();
                let next = curriculum_rate(p0, lambda, m + 1).unwrap();
                prop_assert!(next <= p && p <= p0);
                prop_assert!((p - p0 * (-lambda * m as f64).exp()).abs() < 1e-12);
            }

            #[test]
            fn draws_depend_only_on_seed_and_step(seed in 0u64..1000, step in 1u64..1000, n in 1usize..40) {
                let config = TrainConfig { seed, lambda: 1e-3, ..TrainConfig::default() };
                prop_assert_eq!(
                    curriculum_draws(&config, step, n).unwrap(),
                    curriculum_draws(&config, step, n).unwrap()
                );
            }
        }
    }
}
