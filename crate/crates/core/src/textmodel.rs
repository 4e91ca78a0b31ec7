//! Hashed bag-of-embeddings encoder with the two-layer fully connected
//! head, plus the plain SGD update. Dropout inside `encode` doubles as the
//! contrastive view mechanism: two calls with different seeds produce the
//! two views of the same sentence.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, NodeId, Tape};
use crate::error::{ApamError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Name-keyed gradient map; BTreeMap so iteration order is deterministic.
pub type Gradients<F> = BTreeMap<String, Tensor<F>>;

/// Hashed vocabulary: token → bucket is a pure function of
/// (token, hash_buckets).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub hash_buckets: usize,
    pub lowercase: bool,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            hash_buckets: 1 << 15,
            lowercase: true,
        }
    }
}

impl Vocab {
    /// Whitespace-plus-punctuation tokenizer.
    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<String> {
        text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
            .filter(|t| !t.is_empty())
            .map(|t| {
                if self.lowercase {
                    t.to_lowercase()
                } else {
                    t.to_string()
                }
            })
            .collect()
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.hash_buckets as u64) as usize
    }

    pub fn buckets(&self, text: &str) -> Vec<usize> {
        self.tokenize(text).iter().map(|t| self.bucket(t)).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64; used everywhere a sub-seed is derived from (seed, index).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub embed_dim: usize,
    pub fc1_dim: usize,
    pub fc2_dim: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: Vocab::default(),
            embed_dim: 128,
            fc1_dim: 256,
            fc2_dim: 128,
            num_classes: 2,
            dropout_p: 0.1,
        }
    }
}

/// The main model parameters W: embedding table plus fully connected head.
/// The classification head may be absent before fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F: Real> {
    pub cfg: ModelConfig,
    arrays: BTreeMap<String, Tensor<F>>,
}

fn xavier<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<F> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::c((rng.gen::<f64>() * 2.0 - 1.0) * a))
        .collect();
    Tensor::matrix(data, rows, cols).unwrap()
}

impl<F: Real> EncoderParams<F> {
    /// Encoder-only initialization; the head is attached at fine-tuning
    /// time via [`EncoderParams::ensure_head`].
    pub fn init_encoder(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x617061_6d));
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "embedding".to_string(),
            xavier(&mut rng, cfg.vocab.hash_buckets, cfg.embed_dim),
        );
        arrays.insert("fc1.w".to_string(), xavier(&mut rng, cfg.embed_dim, cfg.fc1_dim));
        arrays.insert("fc1.b".to_string(), Tensor::zeros(&[cfg.fc1_dim]));
        arrays.insert("fc2.w".to_string(), xavier(&mut rng, cfg.fc1_dim, cfg.fc2_dim));
        arrays.insert("fc2.b".to_string(), Tensor::zeros(&[cfg.fc2_dim]));
        EncoderParams { cfg, arrays }
    }

    /// Full initialization including the classification head.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut p = Self::init_encoder(cfg, seed);
        p.ensure_head(seed);
        p
    }

    /// Attach a freshly initialized head if none exists yet.
    pub fn ensure_head(&mut self, seed: u64) {
        if self.arrays.contains_key("head.w") {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x68656164));
        self.arrays.insert(
            "head.w".to_string(),
            xavier(&mut rng, self.cfg.fc2_dim, self.cfg.num_classes),
        );
        self.arrays
            .insert("head.b".to_string(), Tensor::zeros(&[self.cfg.num_classes]));
    }

    pub fn has_head(&self) -> bool {
        self.arrays.contains_key("head.w")
    }

    pub fn from_arrays(cfg: ModelConfig, arrays: BTreeMap<String, Tensor<F>>) -> Self {
        EncoderParams { cfg, arrays }
    }

    pub fn arrays(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut BTreeMap<String, Tensor<F>> {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.arrays[name]
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(|t| t.is_finite())
    }

    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        EncoderParams {
            cfg: self.cfg,
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Register every parameter array as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.arrays {
            ids.insert(name.clone(), tape.param(value.clone()));
        }
        BoundParams { ids }
    }
}

/// Tape leaf ids for one parameter set, keyed by array name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Self {
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    /// Convert a leaf-id gradient map to a name-keyed one. Leaves the root
    /// never reached get explicit zero gradients so every per-sample map
    /// covers the same keys.
    pub fn named<F: Real>(&self, tape: &Tape<F>, grads: &GradMap<F>) -> Gradients<F> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = grads
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| tape.value(id).zeros_like());
                (name.clone(), g)
            })
            .collect()
    }
}

/// Forward pass producing the sentence embedding `s = F(x, z)`.
///
/// Dropout is applied after mean pooling and after fc1 when `train_mode`;
/// eval mode ignores `dropout_seed` entirely.
pub fn encode<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    text: &str,
    dropout_seed: u64,
    train_mode: bool,
) -> Result<NodeId> {
    let idx = cfg.vocab.buckets(text);
    if idx.is_empty() {
        return Err(ApamError::Ingest(format!(
            "text has no tokens after tokenization: {text:?}"
        )));
    }
    let emb = tape.embedding_lookup(bound.id("embedding"), &idx)?;
    let mut h = tape.mean_rows(emb)?;
    if train_mode && cfg.dropout_p > 0.0 {
        h = tape.dropout(h, cfg.dropout_p, mix_seed(dropout_seed, 0))?;
    }
    let z1 = tape.matmul(h, bound.id("fc1.w"))?;
    let z1 = tape.add(z1, bound.id("fc1.b"))?;
    let mut h1 = tape.relu(z1);
    if train_mode && cfg.dropout_p > 0.0 {
        h1 = tape.dropout(h1, cfg.dropout_p, mix_seed(dropout_seed, 1))?;
    }
    let z2 = tape.matmul(h1, bound.id("fc2.w"))?;
    let z2 = tape.add(z2, bound.id("fc2.b"))?;
    Ok(tape.relu(z2))
}

/// Classification head: embedding → C logits.
pub fn classify<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    embedding: NodeId,
) -> Result<NodeId> {
    let z = tape.matmul(embedding, bound.id("head.w"))?;
    tape.add(z, bound.id("head.b"))
}

/// Plain SGD: each array moves by `−lr · grad`. The gradient map must
/// cover exactly the parameter arrays.
pub fn sgd_step<F: Real>(
    params: &mut EncoderParams<F>,
    grads: &Gradients<F>,
    lr: F,
) -> Result<()> {
    apply_sgd(params.arrays_mut(), grads, lr)
}

/// Shared SGD kernel over any name-keyed parameter map.
pub fn apply_sgd<F: Real>(
    arrays: &mut BTreeMap<String, Tensor<F>>,
    grads: &Gradients<F>,
    lr: F,
) -> Result<()> {
    if arrays.len() != grads.len() || !grads.keys().all(|k| arrays.contains_key(k)) {
        let missing: Vec<&String> = arrays.keys().filter(|k| !grads.contains_key(*k)).collect();
        return Err(ApamError::contract(
            "sgd_step",
            format!("gradient map does not cover parameters exactly; missing {missing:?}"),
        ));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(ApamError::numeric(
                "sgd_step",
                format!("non-finite gradient in layer {name}"),
            ));
        }
        arrays.get_mut(name).unwrap().axpy(-lr, g);
    }
    Ok(())
}
