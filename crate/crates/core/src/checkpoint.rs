//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json`, `vocab.json` and
//! one little-endian `f64` blob per parameter set plus `optimizer.bin`.
//! The manifest lists every parameter's name and shape so blobs can be
//! checked before they are copied in.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::training::{ModelConfig, Models, Optimizers, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const VOCAB: &str = "vocab.json";
const STORES: [&str; 3] = ["encoder", "selector", "generator"];

/// Hash of everything that shapes a training run except its length, so a
/// run may be resumed with a larger `max_steps`.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut train = train.clone();
    train.max_steps = 0;
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(model).expect("config serialises"));
    hasher.update(serde_json::to_vec(&train).expect("config serialises"));
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub p: f64,
    pub config_hash: String,
    pub vocab_hash: String,
    pub warmup_step: u64,
    pub best_validation_ppl: Option<f64>,
    pub bad_rounds: usize,
    pub lr_scale: f64,
    pub stopped_early: bool,
    /// Adam step counts for encoder, selector and generator.
    pub optimizer_steps: [u64; 3],
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: [Vec<ParamEntry>; 3],
}

/// Everything needed to evaluate or resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub models: Models,
    pub state: TrainState,
    pub vocabulary: Vocabulary,
}

impl Checkpoint {
    /// Refuses to resume under a different configuration.
    pub fn check_resume(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        let hash = config_hash(model, train);
        if hash != self.manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint has {}, current config is {hash}",
                self.manifest.config_hash
            )));
        }
        Ok(())
    }
}

fn stores(models: &Models) -> [&ParamStore; 3] {
    [&models.encoder.store, &models.selector.store, &models.generator.store]
}

fn entries(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .names()
        .iter()
        .zip(store.values())
        .map(|(name, v)| ParamEntry {
            name: name.clone(),
            rows: v.nrows(),
            cols: v.ncols(),
        })
        .collect()
}

fn to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{}: truncated blob", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a checkpoint into `dir`, creating it if needed. The manifest is
/// written last so a half-written directory fails to load.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    models: &Models,
    state: &TrainState,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    vocabulary: &Vocabulary,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let stores = stores(models);
    for (name, store) in STORES.iter().zip(stores) {
        let bytes = to_bytes(store.values().iter().flat_map(|m| m.iter().copied()));
        write(&dir.join(format!("{name}.bin")), &bytes)?;
    }
    let opts = &state.optimizers;
    let bytes = to_bytes(
        [&opts.encoder, &opts.selector, &opts.generator]
            .into_iter()
            .flat_map(|adam| adam.flatten()),
    );
    write(&dir.join("optimizer.bin"), &bytes)?;
    vocabulary.save(dir.join(VOCAB))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step: state.step,
        p: state.p,
        config_hash: config_hash(model_config, train_config),
        vocab_hash: vocabulary.content_hash(),
        warmup_step: state.warmup_step,
        best_validation_ppl: state.best_validation_ppl,
        bad_rounds: state.bad_rounds,
        lr_scale: state.lr_scale,
        stopped_early: state.stopped_early,
        optimizer_steps: [opts.encoder.t, opts.selector.t, opts.generator.t],
        model_config: *model_config,
        train_config: train_config.clone(),
        params: stores.map(entries),
    };
    write(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn fill_store(store: &mut ParamStore, expected: &[ParamEntry], flat: &[f64], path: &Path) -> Result<()> {
    let actual = entries(store);
    if actual != expected {
        return Err(Error::Checkpoint(format!(
            "{}: parameter layout does not match the stored model configuration",
            path.display()
        )));
    }
    let total: usize = expected.iter().map(|e| e.rows * e.cols).sum();
    if flat.len() != total {
        return Err(Error::Checkpoint(format!(
            "{}: {} values, expected {total}",
            path.display(),
            flat.len()
        )));
    }
    let mut offset = 0;
    for (value, entry) in store.values_mut().iter_mut().zip(expected) {
        let n = entry.rows * entry.cols;
        *value = Array2::from_shape_vec((entry.rows, entry.cols), flat[offset..offset + n].to_vec())
            .expect("shape checked above");
        offset += n;
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            version.map_or_else(|| "missing".to_string(), |v| v.to_string())
        )));
    }
    Ok(serde_json::from_value(raw)?)
}

/// Loads a checkpoint, rebuilding models from the stored configuration.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let vocabulary = Vocabulary::load(dir.join(VOCAB))?;
    if vocabulary.content_hash() != manifest.vocab_hash {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary hash does not match the manifest",
            dir.display()
        )));
    }
    let mut models = Models::new(&manifest.model_config, vocabulary.len(), manifest.train_config.seed)?;
    {
        let targets = [
            &mut models.encoder.store,
            &mut models.selector.store,
            &mut models.generator.store,
        ];
        for ((name, store), expected) in STORES.iter().zip(targets).zip(&manifest.params) {
            let path = dir.join(format!("{name}.bin"));
            let flat = from_bytes(&path, &read(&path)?)?;
            fill_store(store, expected, &flat, &path)?;
        }
    }
    let mut optimizers = Optimizers::new(&models);
    let path = dir.join("optimizer.bin");
    let flat = from_bytes(&path, &read(&path)?)?;
    let sizes: Vec<usize> = stores(&models).iter().map(|s| 2 * s.num_scalars()).collect();
    if flat.len() != sizes.iter().sum::<usize>() {
        return Err(Error::Checkpoint(format!("{}: unexpected optimiser size", path.display())));
    }
    let [t_enc, t_sel, t_gen] = manifest.optimizer_steps;
    let (enc, rest) = flat.split_at(sizes[0]);
    let (sel, gen) = rest.split_at(sizes[1]);
    optimizers.encoder.restore(t_enc, enc)?;
    optimizers.selector.restore(t_sel, sel)?;
    optimizers.generator.restore(t_gen, gen)?;
    let state = TrainState {
        step: manifest.step,
        p: manifest.p,
        warmup_step: manifest.warmup_step,
        best_validation_ppl: manifest.best_validation_ppl,
        bad_rounds: manifest.bad_rounds,
        lr_scale: manifest.lr_scale,
        stopped_early: manifest.stopped_early,
        optimizers,
    };
    Ok(Checkpoint {
        manifest,
        models,
        state,
        vocabulary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::synthetic::{toy_corpus, ToySpec};

    fn tiny() -> (ModelConfig, TrainConfig, Vocabulary, Models) {
        let corpus = toy_corpus(ToySpec {
            examples: 3,
            knowledge_per_example: 2,
            seed: 1,
        });
        let vocab = build_vocabulary(&corpus, 100).unwrap();
        let mut mc = ModelConfig::toy();
        mc.encoder.width = 8;
        mc.encoder.heads = 2;
        mc.encoder.ff_width = 16;
        mc.selector.hidden = 8;
        mc.generator.width = 8;
        mc.generator.heads = 2;
        mc.generator.layers = 1;
        mc.generator.ff_width = 16;
        let models = Models::new(&mc, vocab.len(), 4).unwrap();
        (mc, TrainConfig::toy(), vocab, models)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (mc, tc, vocab, models) = tiny();
        let mut state = TrainState::new(&models, &tc);
        state.step = 7;
        state.p = 0.123_456_789_012_345_67;
        state.best_validation_ppl = Some(std::f64::consts::PI);
        state.lr_scale = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &models, &state, &mc, &tc, &vocab).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.models, models);
        assert_eq!(ck.state, state);
        assert_eq!(ck.vocabulary, vocab);
        ck.check_resume(&mc, &tc).unwrap();
        let mut longer = tc.clone();
        longer.max_steps += 10;
        ck.check_resume(&mc, &longer).unwrap();
        let mut other = tc.clone();
        other.lambda *= 2.0;
        assert!(matches!(ck.check_resume(&mc, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_bump_is_refused() {
        let (mc, tc, vocab, models) = tiny();
        let state = TrainState::new(&models, &tc);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &models, &state, &mc, &tc, &vocab).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        raw["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        fs::write(&path, raw.to_string()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
    }

    #[test]
    fn corrupt_blob_is_refused() {
        let (mc, tc, vocab, models) = tiny();
        let state = TrainState::new(&models, &tc);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &models, &state, &mc, &tc, &vocab).unwrap();
        let blob = dir.path().join("selector.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
