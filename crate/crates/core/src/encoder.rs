//! Hashing vectorizer plus a ReLU MLP producing unit-norm representations.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Example, Input};
use crate::diffcore::{Tape, Tensor2, Var};
use crate::rng::stream;
use crate::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// Offset basis of the second hash that picks the sign of a feature.
const SIGN_OFFSET: u64 = FNV_OFFSET ^ 0x9e37_79b9_7f4a_7c15;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_with(FNV_OFFSET, bytes)
}

fn fnv1a64_with(basis: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(basis, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingConfig {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub signed: bool,
}

impl Default for HashingConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            ngram_min: 1,
            ngram_max: 2,
            signed: true,
        }
    }
}

impl HashingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!("invalid hashing config {self:?}")));
        }
        Ok(())
    }
}

/// Lowercased whitespace tokens joined into n-grams for every n in
/// `ngram_min..=ngram_max`.
pub fn ngrams(cfg: &HashingConfig, text: &str) -> Vec<String> {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    let mut out = Vec::new();
    for n in cfg.ngram_min..=cfg.ngram_max {
        if n > tokens.len() {
            break;
        }
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

/// Index and sign that an n-gram contributes to.
pub fn feature_slot(cfg: &HashingConfig, gram: &str) -> (usize, f64) {
    let idx = (fnv1a64(gram.as_bytes()) % cfg.dim as u64) as usize;
    let sign = if cfg.signed && fnv1a64_with(SIGN_OFFSET, gram.as_bytes()) >> 63 == 1 {
        -1.0
    } else {
        1.0
    };
    (idx, sign)
}

/// Sparse hashed features of `text`: `(index, value)` pairs sorted by index.
/// Colliding contributions are summed and exact cancellations dropped.
pub fn hash_vectorize(cfg: &HashingConfig, text: &str) -> Vec<(usize, f64)> {
    let mut entries: Vec<(usize, f64)> = ngrams(cfg, text)
        .iter()
        .map(|g| feature_slot(cfg, g))
        .collect();
    entries.sort_by_key(|&(i, _)| i);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for (i, v) in entries {
        match merged.last_mut() {
            Some((j, acc)) if *j == i => *acc += v,
            _ => merged.push((i, v)),
        }
    }
    merged.retain(|&(_, v)| v != 0.0);
    merged
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`; the layer computes `x · weight + bias`.
    pub weight: Tensor2,
    pub bias: Tensor2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub hashing: HashingConfig,
    pub layers: Vec<Layer>,
}

/// Result of a differentiable forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Unit-norm representations, one row per input.
    pub reps: Var,
    /// Parameter leaves in [`EncoderState::param_names`] order.
    pub params: Vec<Var>,
}

impl EncoderState {
    /// MLP `hashing.dim → widths[0] → … → widths[last]` with Glorot-uniform
    /// weights and biases uniform in `±1/√fan_in`. Nonzero biases keep the
    /// output of an empty input away from the zero vector.
    pub fn new(hashing: HashingConfig, widths: &[usize], seed: u64) -> Result<Self> {
        hashing.validate()?;
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut fan_in = hashing.dim;
        let mut layers = Vec::with_capacity(widths.len());
        for (li, &fan_out) in widths.iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = stream(seed, "encoder-init", &[li as u64]);
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let b_limit = 1.0 / (fan_in as f64).sqrt();
            let bias = (0..fan_out)
                .map(|_| rng.random_range(-b_limit..b_limit))
                .collect();
            layers.push(Layer {
                weight: Tensor2::from_vec(fan_in, fan_out, values)?,
                bias: Tensor2::from_vec(1, fan_out, bias)?,
            });
            fan_in = fan_out;
        }
        Ok(Self { hashing, layers })
    }

    pub fn from_layers(hashing: HashingConfig, layers: Vec<Layer>) -> Result<Self> {
        let s = Self { hashing, layers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.hashing.validate()?;
        if self.layers.is_empty() {
            return Err(Error::Config("encoder has no layers".into()));
        }
        let mut fan_in = self.hashing.dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.rows() != fan_in || l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::dim(
                    "encoder",
                    format!(
                        "layer {i}: weight {:?}, bias {:?}, expected {fan_in} inputs",
                        l.weight.shape(),
                        l.bias.shape()
                    ),
                ));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
            fan_in = l.weight.cols();
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.hashing.dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape(), l.bias.shape()])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Dense `B × input_dim` feature matrix.
    pub fn input_matrix(&self, inputs: &[&Input]) -> Result<Tensor2> {
        let dim = self.hashing.dim;
        let mut x = Tensor2::zeros(inputs.len(), dim);
        for (r, input) in inputs.iter().enumerate() {
            match input {
                Input::Text(t) => {
                    let row = x.row_mut(r);
                    for (i, v) in hash_vectorize(&self.hashing, t) {
                        row[i] = v;
                    }
                }
                Input::RawFeatures(f) => {
                    if f.len() != dim {
                        return Err(Error::dim(
                            "encode_batch",
                            format!("raw features of length {} for input dim {dim}", f.len()),
                        ));
                    }
                    x.row_mut(r).copy_from_slice(f);
                }
            }
        }
        Ok(x)
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in params.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_bias(h, pair[1])?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(tape.l2_normalize_rows(h))
    }

    /// Differentiable forward pass; parameters are recorded as leaves.
    pub fn encode_on_tape(&self, tape: &mut Tape, inputs: &[&Input]) -> Result<Encoded> {
        if inputs.is_empty() {
            return Err(Error::InvalidBatch("cannot encode an empty batch".into()));
        }
        let x = tape.constant(self.input_matrix(inputs)?);
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        let reps = self.forward(tape, x, &params)?;
        Ok(Encoded { reps, params })
    }

    /// Forward pass using caller-provided parameter leaves (in
    /// [`Self::param_names`] order) instead of this state's values; the
    /// state supplies only the architecture and hashing.
    pub fn encode_with_params(
        &self,
        tape: &mut Tape,
        inputs: &[&Input],
        params: &[Var],
    ) -> Result<Var> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::dim(
                "encode_with_params",
                format!("{} parameters for {} slots", params.len(), shapes.len()),
            ));
        }
        for (v, s) in params.iter().zip(&shapes) {
            if tape.value(*v).shape() != *s {
                return Err(Error::dim(
                    "encode_with_params",
                    format!("{:?} vs {s:?}", tape.value(*v).shape()),
                ));
            }
        }
        if inputs.is_empty() {
            return Err(Error::InvalidBatch("cannot encode an empty batch".into()));
        }
        let x = tape.constant(self.input_matrix(inputs)?);
        self.forward(tape, x, params)
    }

    /// Forward pass without gradients.
    pub fn encode(&self, inputs: &[&Input]) -> Result<Tensor2> {
        if inputs.is_empty() {
            return Err(Error::InvalidBatch("cannot encode an empty batch".into()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(self.input_matrix(inputs)?);
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let reps = self.forward(&mut tape, x, &params)?;
        Ok(tape.value(reps).clone())
    }

    pub fn encode_examples(&self, examples: &[&Example]) -> Result<Tensor2> {
        let inputs: Vec<&Input> = examples.iter().map(|e| &e.input).collect();
        self.encode(&inputs)
    }

    /// Encodes in chunks of `chunk` rows to bound the dense input matrix.
    pub fn encode_all(&self, examples: &[&Example], chunk: usize) -> Result<Tensor2> {
        let mut values = Vec::with_capacity(examples.len() * self.output_dim());
        for part in examples.chunks(chunk.max(1)) {
            values.extend(self.encode_examples(part)?.into_values());
        }
        Tensor2::from_vec(examples.len(), self.output_dim(), values)
    }

    /// SHA-256 over the shapes and little-endian bytes of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update((p.rows() as u64).to_le_bytes());
            h.update((p.cols() as u64).to_le_bytes());
            for v in p.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn snapshot(&self) -> EncoderSnapshot {
        EncoderSnapshot(self.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder: self.clone(),
        };
        let body = serde_json::to_vec(&ckpt)?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&body)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        ckpt.encoder.validate()?;
        Ok(ckpt.encoder)
    }
}

const CHECKPOINT_FORMAT: &str = "sccl-encoder";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    encoder: EncoderState,
}

/// Frozen copy of an encoder. It exposes no mutable access and never
/// records parameters on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSnapshot(EncoderState);

impl EncoderSnapshot {
    pub fn encode(&self, inputs: &[&Input]) -> Result<Tensor2> {
        self.0.encode(inputs)
    }

    pub fn encode_examples(&self, examples: &[&Example]) -> Result<Tensor2> {
        self.0.encode_examples(examples)
    }

    pub fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    pub fn state(&self) -> &EncoderState {
        &self.0
    }
}
