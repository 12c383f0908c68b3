//! Merge methods: task arithmetic, TIES and the DARE variants.
//!
//! Every method prunes each model's task vector at the densities of its plan,
//! scales it by the model's coefficient, and then either sums the results
//! (task arithmetic, dare-linear) or resolves sign conflicts per parameter
//! with an elected sign and a disjoint mean (ties, dare-ties).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::importance::SparsityPlan;
use crate::pruning::{prune_delta, PruneMode};
use crate::rng::derive_seed;
use crate::roles::NamingScheme;
use crate::task_vector::{check_alphas, combine_tensor, provenance, Delta, TaskVector};
use crate::tensor::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MergeMethod {
    TaskArithmetic,
    #[default]
    Ties,
    DareLinear,
    DareTies,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::DareLinear,
        MergeMethod::DareTies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "task-arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::DareLinear => "dare-linear",
            MergeMethod::DareTies => "dare-ties",
        }
    }

    pub fn prune_mode(self) -> PruneMode {
        match self {
            MergeMethod::TaskArithmetic | MergeMethod::Ties => PruneMode::Magnitude,
            MergeMethod::DareLinear | MergeMethod::DareTies => PruneMode::Random,
        }
    }

    pub fn elects_sign(self) -> bool {
        matches!(self, MergeMethod::Ties | MergeMethod::DareTies)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownName {
                what: "merge method",
                name: s.into(),
            })
    }
}

/// +1 if the positive entries carry at least as much total magnitude as the
/// negative ones, otherwise -1.
pub fn elect_sign(values: &[f64]) -> f64 {
    let (pos, neg) = values.iter().fold((0.0, 0.0), |(p, n), &v| {
        if v > 0.0 {
            (p + v, n)
        } else {
            (p, n - v)
        }
    });
    if pos >= neg {
        1.0
    } else {
        -1.0
    }
}

/// Mean of the nonzero entries whose sign matches `sign`; 0 when none do.
pub fn disjoint_mean(values: &[f64], sign: f64) -> f64 {
    let (sum, count) = values
        .iter()
        .filter(|&&v| v != 0.0 && (v > 0.0) == (sign > 0.0))
        .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeOptions {
    pub method: MergeMethod,
    pub seed: u64,
    pub scheme: NamingScheme,
}

/// Seed for model `index`'s random pruning streams.
pub fn model_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

pub fn validate_inputs(
    base: &Checkpoint,
    tvs: &[TaskVector],
    alphas: &[f64],
    plans: &[SparsityPlan],
) -> Result<()> {
    if tvs.is_empty() {
        return Err(Error::EmptyInput("task vector list"));
    }
    check_alphas(alphas, tvs.len())?;
    if plans.len() != tvs.len() {
        return Err(Error::CountMismatch {
            what: "plans",
            expected: tvs.len(),
            found: plans.len(),
        });
    }
    for plan in plans {
        plan.validate()?;
    }
    for tv in tvs {
        tv.ensure_matches(base)?;
    }
    Ok(())
}

/// Merge one tensor. Inputs must already have passed [`validate_inputs`].
pub fn merge_tensor(
    name: &str,
    base: &Tensor,
    tvs: &[TaskVector],
    alphas: &[f64],
    plans: &[SparsityPlan],
    opts: &MergeOptions,
) -> Result<Tensor> {
    let role = opts.scheme.classify(name);
    let mode = opts.method.prune_mode();
    let mut scaled: Vec<Vec<f64>> = Vec::with_capacity(tvs.len());
    for (p, ((tv, plan), &alpha)) in tvs.iter().zip(plans).zip(alphas).enumerate() {
        let delta: &Delta = &tv.deltas[name];
        let density = plan.density_for(name, role)?;
        let pruned = prune_delta(name, delta, density, mode, model_seed(opts.seed, p))?;
        scaled.push(pruned.data.into_iter().map(|v| alpha * v).collect());
    }
    let n = base.len();
    let combined: Vec<f64> = if opts.method.elects_sign() {
        let mut column = Vec::with_capacity(scaled.len());
        (0..n)
            .map(|i| {
                column.clear();
                column.extend(scaled.iter().map(|s| s[i]));
                disjoint_mean(&column, elect_sign(&column))
            })
            .collect()
    } else {
        (0..n).map(|i| scaled.iter().map(|s| s[i]).sum()).collect()
    };
    combine_tensor(name, base, &combined)
}

/// Metadata recorded on a merged checkpoint.
pub fn merge_metadata(
    tvs: &[TaskVector],
    alphas: &[f64],
    plans: &[SparsityPlan],
    opts: &MergeOptions,
) -> BTreeMap<String, String> {
    let mut meta = provenance(tvs, alphas);
    meta.insert("merge.method".to_string(), opts.method.as_str().to_string());
    meta.insert("merge.seed".to_string(), format!("{}", opts.seed));
    let bounds: Vec<String> = tvs
        .iter()
        .zip(plans)
        .map(|(tv, plan)| {
            format!(
                "\"{}\":[{},{}]",
                tv.source_model_id, plan.bounds.gamma, plan.bounds.epsilon
            )
        })
        .collect();
    meta.insert("merge.bounds".to_string(), format!("{{{}}}", bounds.join(",")));
    for (tv, plan) in tvs.iter().zip(plans) {
        meta.insert(format!("merge.plan_digest.{}", tv.source_model_id), plan.digest());
    }
    meta
}

/// `base + combine_p(alpha_p * g_p(delta_p))` over every tensor of `base`.
///
/// `plans[p]` supplies the densities for `tvs[p]`. Models are reduced in the
/// order given, so the result is a deterministic function of the inputs.
pub fn merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    alphas: &[f64],
    plans: &[SparsityPlan],
    opts: &MergeOptions,
) -> Result<Checkpoint> {
    validate_inputs(base, tvs, alphas, plans)?;
    let mut merged = Checkpoint::new();
    for (name, tensor) in &base.tensors {
        merged.insert(name.clone(), merge_tensor(name, tensor, tvs, alphas, plans, opts)?);
    }
    merged.metadata = merge_metadata(tvs, alphas, plans, opts);
    Ok(merged)
}
