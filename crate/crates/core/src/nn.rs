//! Transformer stacks shared by the knowledge encoder and the generator,
//! plus the Adam optimiser.
//!
//! Blocks are pre-LayerNorm: `x + Attn(LN(x))` then `x + FF(LN(x))`, with a
//! final LayerNorm. Training runs through the [`Tape`]; decoding uses the
//! plain-matrix path in [`IncrementalDecoder`] so each new token costs one
//! row per layer.

use ndarray::{s, Array1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu, Bound, Matrix, ParamStore, Segment, Tape, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

pub(crate) fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub max_positions: usize,
    pub segment_types: usize,
    pub causal: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.layers == 0 || self.ff_width == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.segment_types == 0 {
            return Err(Error::Config("vocabulary, positions and segments must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_1: usize,
    b_1: usize,
    w_2: usize,
    b_2: usize,
}

/// Positions of a transformer's parameters inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transformer {
    pub config: TransformerConfig,
    tok: usize,
    pos: usize,
    seg: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
}

/// Several sequences stacked row-wise.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl SeqBatch {
    pub fn push(&mut self, ids: &[usize], segment_ids: &[usize]) {
        debug_assert_eq!(ids.len(), segment_ids.len());
        let start = self.ids.len();
        self.ids.extend_from_slice(ids);
        self.positions.extend(0..ids.len());
        self.segment_ids.extend_from_slice(segment_ids);
        self.segments.push(Segment {
            start,
            len: ids.len(),
        });
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

impl Transformer {
    /// Appends freshly initialised parameters to `store`.
    pub fn init<R: Rng>(store: &mut ParamStore, config: TransformerConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f = config.ff_width;
        let name = |n: &str| format!("{prefix}.{n}");
        let emb_std = 0.1;
        let tok = store.add(name("tok_emb"), normal_matrix(rng, config.vocab_size, d, emb_std));
        let pos = store.add(name("pos_emb"), normal_matrix(rng, config.max_positions, d, emb_std));
        let seg = store.add(name("seg_emb"), normal_matrix(rng, config.segment_types, d, emb_std));
        let residual_std = 1.0 / ((d as f64).sqrt() * (2.0 * config.layers as f64).sqrt());
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |p: &str| name(&format!("layer{l}.{p}"));
            layers.push(LayerIdx {
                ln1_g: store.add(n("ln1.gain"), Matrix::ones((1, d))),
                ln1_b: store.add(n("ln1.bias"), Matrix::zeros((1, d))),
                w_qkv: store.add(n("attn.w_qkv"), normal_matrix(rng, d, 3 * d, 1.0 / (d as f64).sqrt())),
                b_qkv: store.add(n("attn.b_qkv"), Matrix::zeros((1, 3 * d))),
                w_o: store.add(n("attn.w_o"), normal_matrix(rng, d, d, residual_std)),
                b_o: store.add(n("attn.b_o"), Matrix::zeros((1, d))),
                ln2_g: store.add(n("ln2.gain"), Matrix::ones((1, d))),
                ln2_b: store.add(n("ln2.bias"), Matrix::zeros((1, d))),
                w_1: store.add(n("ff.w_1"), normal_matrix(rng, d, f, 1.0 / (d as f64).sqrt())),
                b_1: store.add(n("ff.b_1"), Matrix::zeros((1, f))),
                w_2: store.add(n("ff.w_2"), normal_matrix(rng, f, d, residual_std)),
                b_2: store.add(n("ff.b_2"), Matrix::zeros((1, d))),
            });
        }
        let lnf_g = store.add(name("ln_f.gain"), Matrix::ones((1, d)));
        let lnf_b = store.add(name("ln_f.bias"), Matrix::zeros((1, d)));
        Ok(Self {
            config,
            tok,
            pos,
            seg,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    pub fn token_embedding_index(&self) -> usize {
        self.tok
    }

    fn check_batch(&self, batch: &SeqBatch) -> Result<()> {
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(seg) = batch.segments.iter().find(|s| s.len > self.config.max_positions) {
            return Err(Error::Capacity {
                needed: seg.len,
                capacity: self.config.max_positions,
            });
        }
        if let Some(&s) = batch.segment_ids.iter().find(|&&s| s >= self.config.segment_types) {
            return Err(Error::Shape(format!("segment id {s} out of range")));
        }
        Ok(())
    }

    /// Hidden states of the final layer, one row per input token.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &SeqBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let d = self.config.width;
        let tok = tape.gather(bound.var(self.tok), &batch.ids);
        let pos = tape.gather(bound.var(self.pos), &batch.positions);
        let seg = tape.gather(bound.var(self.seg), &batch.segment_ids);
        let x = tape.add(tok, pos);
        let mut x = tape.add(x, seg);
        for layer in &self.layers {
            let h = tape.layer_norm(x, bound.var(layer.ln1_g), bound.var(layer.ln1_b));
            let qkv = tape.matmul(h, bound.var(layer.w_qkv));
            let qkv = tape.add_row(qkv, bound.var(layer.b_qkv));
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, 2 * d);
            let v = tape.slice_cols(qkv, 2 * d, 3 * d);
            let a = tape.attention(q, k, v, &batch.segments, self.config.heads, self.config.causal);
            let a = tape.matmul(a, bound.var(layer.w_o));
            let a = tape.add_row(a, bound.var(layer.b_o));
            x = tape.add(x, a);
            let h = tape.layer_norm(x, bound.var(layer.ln2_g), bound.var(layer.ln2_b));
            let h = tape.matmul(h, bound.var(layer.w_1));
            let h = tape.add_row(h, bound.var(layer.b_1));
            let h = tape.gelu(h);
            let h = tape.matmul(h, bound.var(layer.w_2));
            let h = tape.add_row(h, bound.var(layer.b_2));
            x = tape.add(x, h);
        }
        Ok(tape.layer_norm(x, bound.var(self.lnf_g), bound.var(self.lnf_b)))
    }
}

fn layer_norm_rows(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    &xhat * gain + bias
}

/// Causal decoding with cached keys and values, without a tape.
///
/// Matches [`Transformer::forward`] on a causal configuration.
#[derive(Debug, Clone)]
pub struct IncrementalDecoder<'a> {
    model: &'a Transformer,
    store: &'a ParamStore,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(model: &'a Transformer, store: &'a ParamStore) -> Self {
        let d = model.config.width;
        let layers = model.layers.len();
        Self {
            model,
            store,
            keys: vec![Matrix::zeros((0, d)); layers],
            values: vec![Matrix::zeros((0, d)); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds `ids` (with their segment ids) and returns the final hidden
    /// state of the last fed position.
    pub fn feed(&mut self, ids: &[usize], segment_ids: &[usize]) -> Result<Array1<f64>> {
        let cfg = &self.model.config;
        if self.len + ids.len() > cfg.max_positions {
            return Err(Error::Capacity {
                needed: self.len + ids.len(),
                capacity: cfg.max_positions,
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("nothing to feed".into()));
        }
        let p = |i| self.store.get(i);
        let d = cfg.width;
        let n = ids.len();
        let mut x = Matrix::zeros((n, d));
        for (r, (&id, &seg)) in ids.iter().zip(segment_ids).enumerate() {
            if id >= cfg.vocab_size {
                return Err(Error::Shape(format!("token id {id} outside vocabulary")));
            }
            let mut row = x.row_mut(r);
            row += &p(self.model.tok).row(id);
            row += &p(self.model.pos).row(self.len + r);
            row += &p(self.model.seg).row(seg);
        }
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, layer) in self.model.layers.iter().enumerate() {
            let h = layer_norm_rows(&x, p(layer.ln1_g), p(layer.ln1_b));
            let qkv = h.dot(p(layer.w_qkv)) + p(layer.b_qkv);
            let q = qkv.slice(s![.., 0..d]);
            let k_new = qkv.slice(s![.., d..2 * d]);
            let v_new = qkv.slice(s![.., 2 * d..3 * d]);
            self.keys[l].append(Axis(0), k_new).expect("key width");
            self.values[l].append(Axis(0), v_new).expect("value width");
            let keys = &self.keys[l];
            let values = &self.values[l];
            let mut att = Matrix::zeros((n, d));
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(s![.., cols.clone()]);
                let kh = keys.slice(s![.., cols.clone()]);
                let vh = values.slice(s![.., cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    let limit = self.len + i + 1;
                    let max = row.iter().take(limit).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut total = 0.0;
                    for (j, v) in row.iter_mut().enumerate() {
                        if j < limit {
                            *v = (*v - max).exp();
                            total += *v;
                        } else {
                            *v = 0.0;
                        }
                    }
                    row.mapv_inplace(|v| v / total);
                }
                att.slice_mut(s![.., cols]).assign(&scores.dot(&vh));
            }
            let a = att.dot(p(layer.w_o)) + p(layer.b_o);
            x += &a;
            let h = layer_norm_rows(&x, p(layer.ln2_g), p(layer.ln2_b));
            let h = (h.dot(p(layer.w_1)) + p(layer.b_1)).mapv(gelu);
            let h = h.dot(p(layer.w_2)) + p(layer.b_2);
            x += &h;
        }
        self.len += n;
        let last = x.slice(s![n - 1..n, ..]).to_owned();
        let out = layer_norm_rows(&last, p(self.model.lnf_g), p(self.model.lnf_b));
        Ok(out.row(0).to_owned())
    }
}

/// Adam with bias correction; moments are kept per parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|v| vec![0.0; v.len()]).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let param = store.get_mut(idx);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((p, &g), m), v) in param.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moments flattened as `[m_0.., v_0.., m_1.., v_1.., ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.v)
            .flat_map(|(m, v)| m.iter().chain(v.iter()).copied())
            .collect()
    }

    pub fn restore(&mut self, t: u64, flat: &[f64]) -> Result<()> {
        let expected: usize = self.m.iter().map(|m| 2 * m.len()).sum();
        if flat.len() != expected {
            return Err(Error::Checkpoint(format!(
                "optimiser state has {} values, expected {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for (m, v) in self.m.iter_mut().zip(self.v.iter_mut()) {
            let n = m.len();
            m.copy_from_slice(&flat[offset..offset + n]);
            v.copy_from_slice(&flat[offset + n..offset + 2 * n]);
            offset += 2 * n;
        }
        self.t = t;
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(causal: bool) -> (ParamStore, Transformer) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            vocab_size: 11,
            width: 8,
            heads: 2,
            layers: 2,
            ff_width: 16,
            max_positions: 12,
            segment_types: 3,
            causal,
        };
        let t = Transformer::init(&mut store, cfg, "t", &mut rng).unwrap();
        (store, t)
    }

    #[test]
    fn incremental_decoder_matches_tape_forward() {
        let (store, model) = tiny(true);
        let ids = [1usize, 4, 7, 2, 9, 3];
        let segs = [0usize, 0, 1, 1, 2, 2];
        let mut batch = SeqBatch::default();
        batch.push(&ids, &segs);
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let out = model.forward(&mut tape, &bound, &batch).unwrap();
        let full = tape.value(out).clone();

        let mut dec = IncrementalDecoder::new(&model, &store);
        let h = dec.feed(&ids[..3], &segs[..3]).unwrap();
        for c in 0..8 {
            assert!((h[c] - full[[2, c]]).abs() < 1e-10);
        }
        for i in 3..ids.len() {
            let h = dec.feed(&ids[i..i + 1], &segs[i..i + 1]).unwrap();
            for c in 0..8 {
                assert!((h[c] - full[[i, c]]).abs() < 1e-10);
            }
        }
        assert!(dec.feed(&[1; 7], &[0; 7]).is_err());
    }

    #[test]
    fn stacked_sequences_do_not_interact() {
        let (store, model) = tiny(false);
        let mut one = SeqBatch::default();
        one.push(&[1, 2, 3], &[0, 0, 1]);
        let mut two = one.clone();
        two.push(&[5, 6], &[1, 1]);
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let a = model.forward(&mut tape, &bound, &one).unwrap();
        let b = model.forward(&mut tape, &bound, &two).unwrap();
        let (a, b) = (tape.value(a).clone(), tape.value(b).clone());
        for r in 0..3 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_out_of_range_inputs() {
        let (store, model) = tiny(false);
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        let mut batch = SeqBatch::default();
        batch.push(&[11], &[0]);
        assert!(model.forward(&mut tape, &bound, &batch).is_err());
        let mut batch = SeqBatch::default();
        batch.push(&[1; 13], &[0; 13]);
        assert!(model.forward(&mut tape, &bound, &batch).is_err());
    }

    #[test]
    fn adam_moves_against_the_gradient_and_restores() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::from_elem((1, 2), 1.0));
        let mut adam = Adam::new(&store, 0.9, 0.999);
        let grads = vec![Matrix::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap()];
        adam.step(&mut store, &grads, 0.1);
        assert!((store.get(0)[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((store.get(0)[[0, 1]] - 1.1).abs() < 1e-6);
        let mut fresh = Adam::new(&store, 0.9, 0.999);
        fresh.restore(adam.t, &adam.flatten()).unwrap();
        assert_eq!(fresh, adam);
        assert!(fresh.restore(1, &[0.0]).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Matrix::from_elem((2, 2), 3.0)];
        clip_grad_norm(&mut g, 1.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}
