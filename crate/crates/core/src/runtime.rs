//! A minimal pre-norm decoder-only transformer.
//!
//! Embedding plus learned positions, then per block: RMS norm, causal
//! multi-head attention (`q`, `k`, `v`, `o`), residual add, RMS norm, a
//! two-matrix GELU MLP, residual add. A final RMS norm and an untied head
//! produce logits. Weight matrices are stored `[out, in]`.
//!
//! The block outputs (the residual stream after each block) are the
//! activation sites used for layer importance.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::importance::ActivationProfile;
use crate::rng::Stream;
use crate::roles::NamingScheme;
use crate::tensor::{Checkpoint, DType, Tensor};

const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    pub naming_scheme: NamingScheme,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            vocab_size: 256,
            hidden_dim: 32,
            num_blocks: 4,
            num_heads: 4,
            mlp_dim: 64,
            max_seq_len: 64,
            naming_scheme: NamingScheme::Toy,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((field, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArch(format!("{field} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArch(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.naming_scheme != NamingScheme::Toy {
            return Err(Error::InvalidArch(format!(
                "the runtime only understands the toy naming scheme, not {}",
                self.naming_scheme
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Every tensor name the runtime reads, with its shape.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (h, m) = (self.hidden_dim, self.mlp_dim);
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.vocab_size, h]),
            ("pos_embed.weight".to_string(), vec![self.max_seq_len, h]),
        ];
        for b in 0..self.num_blocks {
            out.push((format!("blocks.{b}.attn_norm.weight"), vec![h]));
            for p in ["q", "k", "v", "o"] {
                out.push((format!("blocks.{b}.attn.{p}.weight"), vec![h, h]));
            }
            out.push((format!("blocks.{b}.mlp_norm.weight"), vec![h]));
            out.push((format!("blocks.{b}.mlp.up.weight"), vec![m, h]));
            out.push((format!("blocks.{b}.mlp.down.weight"), vec![h, m]));
        }
        out.push(("final_norm.weight".to_string(), vec![h]));
        out.push(("head.weight".to_string(), vec![self.vocab_size, h]));
        out
    }
}

/// How one sample's block output is reduced to a scalar norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormConvention {
    /// Mean over token positions of each position's Euclidean norm.
    #[default]
    MeanTokenL2,
    /// Frobenius norm of the whole `tokens x hidden` matrix.
    Frobenius,
}

impl NormConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            NormConvention::MeanTokenL2 => "mean-token-l2",
            NormConvention::Frobenius => "frobenius",
        }
    }

    pub fn apply(self, m: &Matrix) -> f64 {
        match self {
            NormConvention::MeanTokenL2 => {
                let total: f64 = (0..m.rows).map(|r| libm::sqrt(sum_squares(m.row(r)))).sum();
                total / m.rows as f64
            }
            NormConvention::Frobenius => libm::sqrt(sum_squares(&m.data)),
        }
    }
}

fn sum_squares(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

impl fmt::Display for NormConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-token-l2" => Ok(NormConvention::MeanTokenL2),
            "frobenius" => Ok(NormConvention::Frobenius),
            _ => Err(Error::UnknownName {
                what: "norm convention",
                name: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub samples: Vec<Vec<u32>>,
    pub source: String,
}

impl CalibrationSet {
    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyInput("calibration set"));
        }
        for s in &self.samples {
            check_tokens(s, arch)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_tokens(tokens: &[u32], arch: &ArchConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    if tokens.len() > arch.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: arch.max_seq_len,
        });
    }
    match tokens.iter().find(|&&t| t as usize >= arch.vocab_size) {
        Some(&token) => Err(Error::TokenOutOfRange {
            token,
            vocab_size: arch.vocab_size,
        }),
        None => Ok(()),
    }
}

/// One token per byte, truncated to `max_seq_len`.
pub fn tokenize(text: &[u8], max_seq_len: usize) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::EmptyInput("text"));
    }
    Ok(text.iter().take(max_seq_len).map(|&b| u32::from(b)).collect())
}

/// Inverse of [`tokenize`]; ids above 255 are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

struct Block<'a> {
    attn_norm: &'a [f32],
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    o: &'a [f32],
    mlp_norm: &'a [f32],
    up: &'a [f32],
    down: &'a [f32],
}

/// Weights of a checkpoint bound to an architecture.
pub struct Model<'a> {
    arch: &'a ArchConfig,
    embed: &'a [f32],
    pos: &'a [f32],
    blocks: Vec<Block<'a>>,
    final_norm: &'a [f32],
    head: &'a [f32],
}

/// Block outputs and final logits of one forward pass.
pub struct ForwardOutput {
    pub block_outputs: Vec<Matrix>,
    pub logits: Matrix,
}

impl<'a> Model<'a> {
    pub fn bind(ckpt: &'a Checkpoint, arch: &'a ArchConfig) -> Result<Model<'a>> {
        arch.validate()?;
        for (name, shape) in arch.layout() {
            let t = ckpt.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let w = |name: &str| ckpt.tensors[name].data();
        let blocks = (0..arch.num_blocks)
            .map(|b| Block {
                attn_norm: w(&format!("blocks.{b}.attn_norm.weight")),
                q: w(&format!("blocks.{b}.attn.q.weight")),
                k: w(&format!("blocks.{b}.attn.k.weight")),
                v: w(&format!("blocks.{b}.attn.v.weight")),
                o: w(&format!("blocks.{b}.attn.o.weight")),
                mlp_norm: w(&format!("blocks.{b}.mlp_norm.weight")),
                up: w(&format!("blocks.{b}.mlp.up.weight")),
                down: w(&format!("blocks.{b}.mlp.down.weight")),
            })
            .collect();
        Ok(Model {
            arch,
            embed: w("embed.weight"),
            pos: w("pos_embed.weight"),
            blocks,
            final_norm: w("final_norm.weight"),
            head: w("head.weight"),
        })
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        check_tokens(tokens, self.arch)?;
        let h = self.arch.hidden_dim;
        let seq = tokens.len();
        let mut x = Matrix::zeros(seq, h);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &self.embed[tok as usize * h..(tok as usize + 1) * h];
            let p = &self.pos[t * h..(t + 1) * h];
            for ((dst, a), b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *dst = a + b;
            }
        }
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            self.attention(block, &mut x);
            self.mlp(block, &mut x);
            block_outputs.push(x.clone());
        }
        let mut logits = Matrix::zeros(seq, self.arch.vocab_size);
        let mut normed = vec![0.0; h];
        for t in 0..seq {
            rms_norm(x.row(t), self.final_norm, &mut normed);
            matvec(self.head, &normed, logits.row_mut(t));
        }
        Ok(ForwardOutput { block_outputs, logits })
    }

    fn attention(&self, block: &Block<'_>, x: &mut Matrix) {
        let h = self.arch.hidden_dim;
        let heads = self.arch.num_heads;
        let dh = self.arch.head_dim();
        let seq = x.rows;
        let mut q = Matrix::zeros(seq, h);
        let mut k = Matrix::zeros(seq, h);
        let mut v = Matrix::zeros(seq, h);
        let mut normed = vec![0.0; h];
        for t in 0..seq {
            rms_norm(x.row(t), block.attn_norm, &mut normed);
            matvec(block.q, &normed, q.row_mut(t));
            matvec(block.k, &normed, k.row_mut(t));
            matvec(block.v, &normed, v.row_mut(t));
        }
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut mixed = vec![0.0f32; h];
        let mut out = vec![0.0f32; h];
        let mut weights = vec![0.0f32; seq];
        for t in 0..seq {
            for head in 0..heads {
                let span = head * dh..(head + 1) * dh;
                let qt = &q.row(t)[span.clone()];
                let mut max = f32::NEG_INFINITY;
                for (s, w) in weights.iter_mut().enumerate().take(t + 1) {
                    *w = dot(qt, &k.row(s)[span.clone()]) * scale;
                    max = max.max(*w);
                }
                let mut total = 0.0;
                for w in weights.iter_mut().take(t + 1) {
                    *w = libm::expf(*w - max);
                    total += *w;
                }
                let dst = &mut mixed[span.clone()];
                dst.fill(0.0);
                for (s, w) in weights.iter().enumerate().take(t + 1) {
                    for (d, vv) in dst.iter_mut().zip(&v.row(s)[span.clone()]) {
                        *d += w / total * vv;
                    }
                }
            }
            matvec(block.o, &mixed, &mut out);
            for (xi, oi) in x.row_mut(t).iter_mut().zip(&out) {
                *xi += oi;
            }
        }
    }

    fn mlp(&self, block: &Block<'_>, x: &mut Matrix) {
        let h = self.arch.hidden_dim;
        let mut normed = vec![0.0; h];
        let mut hidden = vec![0.0; self.arch.mlp_dim];
        let mut out = vec![0.0; h];
        for t in 0..x.rows {
            rms_norm(x.row(t), block.mlp_norm, &mut normed);
            matvec(block.up, &normed, &mut hidden);
            for a in hidden.iter_mut() {
                *a = gelu(*a);
            }
            matvec(block.down, &hidden, &mut out);
            for (xi, oi) in x.row_mut(t).iter_mut().zip(&out) {
                *xi += oi;
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = w @ x` for `w` stored `[out.len(), x.len()]`.
fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o = dot(row, x);
    }
}

pub fn rms_norm(x: &[f32], weight: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / libm::sqrtf(ms + RMS_EPS);
    for ((o, v), w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + libm::tanhf(C * (x + 0.044_715 * x * x * x)))
}

/// Block outputs (tokens x hidden) for every block, in block order.
pub fn forward_capture(ckpt: &Checkpoint, arch: &ArchConfig, tokens: &[u32]) -> Result<Vec<Matrix>> {
    Ok(Model::bind(ckpt, arch)?.forward(tokens)?.block_outputs)
}

/// Mean per-block activation norm over the calibration set.
pub fn profile_model(
    ckpt: &Checkpoint,
    arch: &ArchConfig,
    calib: &CalibrationSet,
    convention: NormConvention,
    model_id: &str,
) -> Result<ActivationProfile> {
    calib.validate(arch)?;
    let model = Model::bind(ckpt, arch)?;
    let mut sums = vec![0.0f64; arch.num_blocks];
    for sample in &calib.samples {
        let out = model.forward(sample)?;
        for (s, m) in sums.iter_mut().zip(&out.block_outputs) {
            *s += convention.apply(m);
        }
    }
    let n = calib.len();
    Ok(ActivationProfile {
        model_id: model_id.to_string(),
        layer_norms: sums.into_iter().map(|s| s / n as f64).enumerate().collect(),
        num_samples: n,
        norm_convention: convention.as_str().to_string(),
    })
}

fn log_softmax_at(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| libm::exp(f64::from(l) - max)).sum::<f64>();
    f64::from(logits[target]) - max - libm::log(lse)
}

/// Mean next-token cross-entropy over every predicted position of every sample.
pub fn eval_loss(ckpt: &Checkpoint, arch: &ArchConfig, calib: &CalibrationSet) -> Result<f64> {
    calib.validate(arch)?;
    if let Some(s) = calib.samples.iter().find(|s| s.len() < 2) {
        return Err(Error::SequenceTooShort { len: s.len(), min: 2 });
    }
    let model = Model::bind(ckpt, arch)?;
    let (mut total, mut count) = (0.0f64, 0usize);
    for sample in &calib.samples {
        let logits = model.forward(sample)?.logits;
        for (t, &next) in sample.iter().enumerate().skip(1) {
            total -= log_softmax_at(logits.row(t - 1), next as usize);
            count += 1;
        }
    }
    Ok((total / count as f64).max(0.0))
}

/// Extend `prompt` to `len` tokens by sampling at `temperature`
/// (greedy when the temperature is 0).
pub fn sample(
    ckpt: &Checkpoint,
    arch: &ArchConfig,
    prompt: &[u32],
    len: usize,
    temperature: f64,
    stream: &mut Stream,
) -> Result<Vec<u32>> {
    let model = Model::bind(ckpt, arch)?;
    let mut tokens = prompt.to_vec();
    while tokens.len() < len {
        let logits = model.forward(&tokens)?.logits;
        let last = logits.row(tokens.len() - 1);
        let next = if temperature <= 0.0 {
            argmax(last)
        } else {
            let max = last.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let weights: Vec<f64> = last
                .iter()
                .map(|&l| libm::exp((f64::from(l) - max) / temperature))
                .collect();
            let mut target = stream.next_f64() * weights.iter().sum::<f64>();
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        tokens.push(next as u32);
    }
    Ok(tokens)
}

fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Random weights: unit-variance embeddings, `1/sqrt(fan_in)` matrices, unit
/// norm gains. Each tensor draws from its own stream keyed by name.
pub fn init_params(arch: &ArchConfig, seed: u64, dtype: DType) -> Result<Checkpoint> {
    arch.validate()?;
    let mut ckpt = Checkpoint::new();
    for (name, shape) in arch.layout() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if shape.len() == 1 {
            vec![1.0; n]
        } else {
            let std = if name.contains("embed") {
                1.0
            } else {
                1.0 / libm::sqrt(shape[1] as f64)
            };
            let mut stream = Stream::new(seed, &name);
            (0..n).map(|_| (stream.next_normal() * std) as f32).collect()
        };
        let t = Tensor::new(dtype, shape, data)?;
        ckpt.insert(name, t);
    }
    Ok(ckpt)
}

/// Every tensor of the layout filled with zeros.
pub fn zero_params(arch: &ArchConfig, dtype: DType) -> Result<Checkpoint> {
    arch.validate()?;
    let mut ckpt = Checkpoint::new();
    for (name, shape) in arch.layout() {
        ckpt.insert(name, Tensor::zeros(dtype, shape)?);
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            vocab_size: 16,
            hidden_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_dim: 12,
            max_seq_len: 10,
            naming_scheme: NamingScheme::Toy,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize(b"Hi", 8).unwrap(), vec![72, 105]);
        assert!(tokenize(b"", 8).is_err());
        assert_eq!(tokenize(b"abcdef", 3).unwrap(), vec![97, 98, 99]);
        assert_eq!(detokenize(&tokenize(b"hello", 64).unwrap()), b"hello");
    }

    #[test]
    fn arch_validation() {
        let mut a = small_arch();
        a.num_heads = 3;
        assert!(a.validate().is_err());
        a.num_heads = 0;
        assert!(a.validate().is_err());
        let mut a = small_arch();
        a.naming_scheme = NamingScheme::LlamaStyle;
        assert!(a.validate().is_err());
    }

    #[test]
    fn zero_model_gives_zero_activations() {
        let arch = small_arch();
        let ckpt = zero_params(&arch, DType::F32).unwrap();
        let acts = forward_capture(&ckpt, &arch, &[1, 2, 3]).unwrap();
        assert_eq!(acts.len(), 2);
        for m in &acts {
            assert_eq!((m.rows, m.cols), (3, 8));
            assert!(m.data.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = small_arch();
        let ckpt = init_params(&arch, 1, DType::F32).unwrap();
        let a = forward_capture(&ckpt, &arch, &[3, 1, 4, 1, 5]).unwrap();
        let b = forward_capture(&ckpt, &arch, &[3, 1, 4, 1, 5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn forward_errors() {
        let arch = small_arch();
        let mut ckpt = init_params(&arch, 1, DType::F32).unwrap();
        assert!(matches!(
            forward_capture(&ckpt, &arch, &[0; 11]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(matches!(
            forward_capture(&ckpt, &arch, &[16]),
            Err(Error::TokenOutOfRange { .. })
        ));
        ckpt.insert("head.weight", Tensor::zeros(DType::F32, vec![16, 7]).unwrap());
        assert!(matches!(forward_capture(&ckpt, &arch, &[1]), Err(Error::ShapeMismatch { .. })));
        ckpt.tensors.remove("head.weight");
        assert!(matches!(forward_capture(&ckpt, &arch, &[1]), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let arch = ArchConfig::default();
        let mut ckpt = init_params(&arch, 2, DType::F32).unwrap();
        ckpt.insert("head.weight", Tensor::zeros(DType::F32, vec![256, 32]).unwrap());
        let calib = CalibrationSet {
            samples: vec![tokenize(b"hello world", 64).unwrap()],
            source: "t".into(),
        };
        let loss = eval_loss(&ckpt, &arch, &calib).unwrap();
        assert!((loss - libm::log(256.0)).abs() < 1e-3, "{loss}");
        let short = CalibrationSet { samples: vec![vec![1]], source: "t".into() };
        assert!(matches!(eval_loss(&ckpt, &arch, &short), Err(Error::SequenceTooShort { .. })));
    }

    #[test]
    fn norm_conventions_on_ones() {
        let m = Matrix { rows: 3, cols: 4, data: vec![1.0; 12] };
        assert_eq!(NormConvention::MeanTokenL2.apply(&m), 2.0);
        assert!((NormConvention::Frobenius.apply(&m) - libm::sqrt(12.0)).abs() < 1e-12);
    }

    #[test]
    fn greedy_sampling_is_deterministic() {
        let arch = small_arch();
        let ckpt = init_params(&arch, 5, DType::F32).unwrap();
        let mut s = Stream::new(0, "x");
        let a = sample(&ckpt, &arch, &[1], 8, 0.0, &mut s).unwrap();
        let b = sample(&ckpt, &arch, &[1], 8, 0.0, &mut s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let mut s1 = Stream::new(9, "x");
        let mut s2 = Stream::new(9, "x");
        assert_eq!(
            sample(&ckpt, &arch, &[1], 8, 1.0, &mut s1).unwrap(),
            sample(&ckpt, &arch, &[1], 8, 1.0, &mut s2).unwrap()
        );
    }
}
