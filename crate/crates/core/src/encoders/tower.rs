use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenize::{fnv1a64, RESERVED_IDS};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Tape, Tensor, Var};

/// Shape and initialization settings shared by all encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub vocab_size: u32,
    pub max_query_len: usize,
    pub max_passage_len: usize,
    pub seed: u64,
    /// Dual encoders only: query and passage use one tower.
    pub share_towers: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            hidden_dim: 32,
            vocab_size: 4096,
            max_query_len: 32,
            max_passage_len: 144,
            seed: 0,
            share_towers: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if self.vocab_size <= RESERVED_IDS {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {RESERVED_IDS} reserved ids"
            )));
        }
        if self.max_query_len == 0 || self.max_passage_len == 0 {
            return Err(Error::Config("maximum lengths must be at least 1".into()));
        }
        Ok(())
    }

    /// Longest cross-encoder input: query, separator, passage.
    pub fn max_joint_len(&self) -> usize {
        self.max_query_len + 1 + self.max_passage_len
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        Self {
            num_layers,
            ..self.clone()
        }
    }
}

/// Anything holding named trainable tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameter values concatenated in `params()` order.
    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.params() {
            out.extend_from_slice(t.values());
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// FNV-1a over parameter names and the bit patterns of their values.
    fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.params() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.values() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

/// One residual block: `H ← H + tanh(H·Wₜ + mean(H)·W꜀ + b)`.
///
/// The context term mixes the pooled sequence into every position; without
/// it a cross encoder could not relate query tokens to passage tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub token: Tensor,
    pub context: Tensor,
    pub bias: Tensor,
}

/// Embedding lookup, residual tanh blocks, mean pooling, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub embedding: Tensor,
    pub blocks: Vec<Block>,
    pub output: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

impl Tower {
    pub fn init(config: &EncoderConfig, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let d = config.hidden_dim;
        let v = config.vocab_size as usize;
        let embed_scale = 3f64.sqrt() / (d as f64).sqrt();
        let embedding = Tensor::matrix(v, d, uniform(&mut rng, v * d, embed_scale)).unwrap();
        let w_scale = 0.5 * 3f64.sqrt() / (d as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                token: Tensor::matrix(d, d, uniform(&mut rng, d * d, w_scale)).unwrap(),
                context: Tensor::matrix(d, d, uniform(&mut rng, d * d, w_scale)).unwrap(),
                bias: Tensor::matrix(1, d, vec![0.0; d]).unwrap(),
            })
            .collect();
        let mut out = uniform(&mut rng, d * d, 0.1 / (d as f64).sqrt());
        for i in 0..d {
            out[i * d + i] += 1.0;
        }
        let output = Tensor::matrix(d, d, out).unwrap();
        Self {
            embedding,
            blocks,
            output,
        }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.hidden_dim;
        Self {
            embedding: Tensor::zeros(vec![config.vocab_size as usize, d]),
            blocks: (0..config.num_layers)
                .map(|_| Block {
                    token: Tensor::zeros(vec![d, d]),
                    context: Tensor::zeros(vec![d, d]),
                    bias: Tensor::zeros(vec![1, d]),
                })
                .collect(),
            output: Tensor::zeros(vec![d, d]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.output.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub(crate) fn named_params<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = vec![(format!("{prefix}.embedding"), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.token"), &b.token));
            out.push((format!("{prefix}.block{i}.context"), &b.context));
            out.push((format!("{prefix}.block{i}.bias"), &b.bias));
        }
        out.push((format!("{prefix}.output"), &self.output));
        out
    }

    pub(crate) fn named_params_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        let mut out = vec![(format!("{prefix}.embedding"), &mut self.embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("{prefix}.block{i}.token"), &mut b.token));
            out.push((format!("{prefix}.block{i}.context"), &mut b.context));
            out.push((format!("{prefix}.block{i}.bias"), &mut b.bias));
        }
        out.push((format!("{prefix}.output"), &mut self.output));
        out
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size()) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Gradient-free forward pass; bit-identical to [`BoundTower::encode`].
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        let d = self.hidden_dim();
        let n = ids.len();
        let mut h = Vec::with_capacity(n * d);
        for &id in ids {
            h.extend_from_slice(self.embedding.row(id as usize));
        }
        for block in &self.blocks {
            let ctx = kernels::mean_rows(&h, n, d);
            let a = kernels::matmul(&h, block.token.values(), n, d, d);
            let c = kernels::matmul(&ctx, block.context.values(), 1, d, d);
            let bias = block.bias.values();
            for (i, hv) in h.iter_mut().enumerate() {
                let j = i % d;
                let z = (a[i] + c[j]) + bias[j];
                *hv += z.tanh();
            }
        }
        let pooled = kernels::mean_rows(&h, n, d);
        Ok(kernels::matmul(&pooled, self.output.values(), 1, d, d))
    }

    /// Records the parameters on `tape`, trainable or detached.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTower {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        BoundTower {
            embedding: put(&self.embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| (put(&b.token), put(&b.context), put(&b.bias)))
                .collect(),
            output: put(&self.output),
        }
    }
}

/// A [`Tower`] whose parameters are recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundTower {
    pub embedding: Var,
    pub blocks: Vec<(Var, Var, Var)>,
    pub output: Var,
}

impl BoundTower {
    /// Differentiable forward pass producing a `[1×d]` embedding.
    pub fn encode(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let mut h = tape.gather_rows(self.embedding, &idx)?;
        for &(token, context, bias) in &self.blocks {
            let ctx = tape.mean_rows(h);
            let a = tape.matmul(h, token)?;
            let c = tape.matmul(ctx, context)?;
            let z = tape.add_row(a, c)?;
            let z = tape.add_row(z, bias)?;
            let act = tape.tanh(z);
            h = tape.add(h, act)?;
        }
        let pooled = tape.mean_rows(h);
        tape.matmul(pooled, self.output)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for &(a, b, c) in &self.blocks {
            out.extend([a, b, c]);
        }
        out.push(self.output);
        out
    }
}
