//! Synthetic base/fine-tune families for end-to-end experiments.
//!
//! A fine-tune is the base plus large random deltas planted in chosen
//! blocks. The calibration task is text sampled from one fine-tune, so it is
//! the task that fine-tune is good at.

use lewis_core::rng::Stream;
use lewis_core::importance::{build_plan_lewis, build_plan_uniform, NormalizeMode};
use lewis_core::runtime::{eval_loss, init_params, profile_model, sample};
use lewis_core::{
    ArchConfig, CalibrationSet, Checkpoint, DType, MergeMethod, MergeOptions, NamingScheme, NormConvention,
    SparsityBounds, SparsityPlan, Tensor,
};

use crate::error::Result;
use crate::pipeline::merge_checkpoints;

/// 4 blocks, hidden 32, byte vocabulary.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        vocab_size: 256,
        hidden_dim: 32,
        num_blocks: 4,
        num_heads: 4,
        mlp_dim: 64,
        max_seq_len: 32,
        naming_scheme: NamingScheme::Toy,
    }
}

/// Copy of `base` with Gaussian noise added to every weight matrix in
/// `blocks`. The noise standard deviation is `scale` times that tensor's
/// initialization scale.
pub fn plant_deltas(
    base: &Checkpoint,
    arch: &ArchConfig,
    blocks: &[usize],
    scale: f64,
    seed: u64,
    label: &str,
) -> Result<Checkpoint> {
    let mut out = base.clone();
    for (name, t) in &base.tensors {
        let role = arch.naming_scheme.classify(name);
        let in_block = role.block_index.is_some_and(|b| blocks.contains(&b));
        if !in_block || !role.kind.is_block_kind() {
            continue;
        }
        let fan_in = t.shape()[1] as f64;
        let std = scale / fan_in.sqrt();
        let mut stream = Stream::new(seed, &format!("{label}/{name}"));
        let data = t
            .data()
            .iter()
            .map(|&v| (f64::from(v) + std * stream.next_normal()) as f32)
            .collect();
        out.insert(name.clone(), Tensor::new(t.dtype(), t.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// `n` sequences of `len` tokens sampled from `model` at `temperature`,
/// each started from a random printable byte.
pub fn sample_task(
    model: &Checkpoint,
    arch: &ArchConfig,
    n: usize,
    len: usize,
    temperature: f64,
    seed: u64,
) -> Result<CalibrationSet> {
    let mut stream = Stream::new(seed, "calibration");
    let samples = (0..n)
        .map(|_| {
            let first = 32 + stream.next_below(95) as u32;
            sample(model, arch, &[first], len, temperature, &mut stream)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CalibrationSet {
        samples,
        source: format!("toy-task(seed={seed})"),
    })
}

/// A base model, two fine-tunes with disjoint planted blocks, and a
/// calibration set drawn from the first fine-tune.
pub struct ToyExperiment {
    pub arch: ArchConfig,
    pub base: Checkpoint,
    /// `(model_id, checkpoint)`; `a` changes blocks 0-1, `b` changes blocks 2-3.
    pub finetunes: Vec<(String, Checkpoint)>,
    pub calibration: CalibrationSet,
}

pub struct ToyConfig {
    /// Multiplier on the initial head weights; larger values give peakier
    /// next-token distributions.
    pub head_scale: f64,
    pub delta_scale_a: f64,
    pub delta_scale_b: f64,
    pub samples: usize,
    pub sample_len: usize,
    pub temperature: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            head_scale: 4.0,
            delta_scale_a: 2.0,
            delta_scale_b: 1.0,
            samples: 15,
            sample_len: 24,
            temperature: 1.0,
        }
    }
}

pub fn build_experiment(seed: u64, config: &ToyConfig) -> Result<ToyExperiment> {
    let arch = toy_arch();
    let mut base = init_params(&arch, seed, DType::F32)?;
    let head = &base.tensors["head.weight"];
    let scaled: Vec<f32> = head.data().iter().map(|&v| (f64::from(v) * config.head_scale) as f32).collect();
    let head = Tensor::new(head.dtype(), head.shape().to_vec(), scaled)?;
    base.insert("head.weight", head);
    let a = plant_deltas(&base, &arch, &[0, 1], config.delta_scale_a, seed, "a")?;
    let b = plant_deltas(&base, &arch, &[2, 3], config.delta_scale_b, seed, "b")?;
    let calibration = sample_task(&a, &arch, config.samples, config.sample_len, config.temperature, seed)?;
    Ok(ToyExperiment {
        arch,
        base,
        finetunes: vec![("a".into(), a), ("b".into(), b)],
        calibration,
    })
}

/// Outcome of one guided-vs-uniform comparison on a toy experiment.
pub struct Trial {
    pub plans: Vec<SparsityPlan>,
    pub guided: Checkpoint,
    pub uniform: Checkpoint,
    pub guided_loss: f64,
    pub uniform_loss: f64,
}

impl Trial {
    /// Block holding the highest density in the first model's plan; ties go
    /// to the lower index.
    pub fn argmax_block(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&l, &d) in &self.plans[0].densities {
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((l, d));
            }
        }
        best.map(|(l, _)| l)
    }
}

/// Profile every model on the calibration set, build LEWIS plans, and merge
/// with `method` next to a uniform-density merge of the same models.
pub fn run_trial(
    ex: &ToyExperiment,
    bounds: SparsityBounds,
    normalize: NormalizeMode,
    uniform_density: f64,
    method: MergeMethod,
    seed: u64,
) -> Result<Trial> {
    let conv = NormConvention::MeanTokenL2;
    let base_profile = profile_model(&ex.base, &ex.arch, &ex.calibration, conv, "base")?;
    let mut plans = Vec::new();
    let mut uniform = Vec::new();
    for (id, ckpt) in &ex.finetunes {
        let profile = profile_model(ckpt, &ex.arch, &ex.calibration, conv, id)?;
        plans.push(build_plan_lewis(&profile, &base_profile, bounds, normalize)?);
        uniform.push(build_plan_uniform(id, ex.arch.num_blocks, uniform_density)?);
    }
    let alphas = vec![1.0; ex.finetunes.len()];
    let opts = MergeOptions {
        method,
        seed,
        scheme: NamingScheme::Toy,
    };
    let guided = merge_checkpoints(&ex.base, &ex.finetunes, &alphas, &plans, &opts)?;
    let uniform = merge_checkpoints(&ex.base, &ex.finetunes, &alphas, &uniform, &opts)?;
    Ok(Trial {
        guided_loss: eval_loss(&guided, &ex.arch, &ex.calibration)?,
        uniform_loss: eval_loss(&uniform, &ex.arch, &ex.calibration)?,
        plans,
        guided,
        uniform,
    })
}
