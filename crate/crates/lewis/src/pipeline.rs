//! Checkpoint-level merge driver.
//!
//! Tensors are merged in parallel on a rayon pool whose size can be capped
//! with `LEWIS_THREADS`. Each tensor's result depends only on its own inputs,
//! so the thread count never changes the output.

use std::collections::BTreeMap;

use lewis_core::importance::{build_plan_uniform, SparsityPlan};
use lewis_core::merge::{merge_metadata, merge_tensor, validate_inputs};
use lewis_core::task_vector::compute_task_vector;
use lewis_core::{Checkpoint, MergeOptions, NamingScheme, PlanRefs, TaskVector};
use rayon::prelude::*;

use crate::error::Result;
use crate::formats::{load_checkpoint, model_id, read_plan, LoadedRecipe};

pub const THREADS_ENV: &str = "LEWIS_THREADS";

/// Rayon pool sized by `LEWIS_THREADS` when set to a positive integer.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("rayon pool")
}

/// Task vectors of every fine-tune against `base`, in input order.
pub fn task_vectors(base: &Checkpoint, finetuned: &[(String, Checkpoint)]) -> Result<Vec<TaskVector>> {
    finetuned
        .par_iter()
        .map(|(id, ft)| Ok(compute_task_vector(base, ft, id)?))
        .collect()
}

/// Merge precomputed task vectors onto `base`, one rayon task per tensor.
pub fn merge_task_vectors(
    base: &Checkpoint,
    tvs: &[TaskVector],
    alphas: &[f64],
    plans: &[SparsityPlan],
    opts: &MergeOptions,
) -> Result<Checkpoint> {
    validate_inputs(base, tvs, alphas, plans)?;
    let merged: Vec<_> = thread_pool().install(|| {
        base.tensors
            .par_iter()
            .map(|(name, t)| Ok((name.clone(), merge_tensor(name, t, tvs, alphas, plans, opts)?)))
            .collect::<Result<_>>()
    })?;
    Ok(Checkpoint {
        tensors: merged.into_iter().collect(),
        metadata: merge_metadata(tvs, alphas, plans, opts),
    })
}

pub fn merge_checkpoints(
    base: &Checkpoint,
    finetuned: &[(String, Checkpoint)],
    alphas: &[f64],
    plans: &[SparsityPlan],
    opts: &MergeOptions,
) -> Result<Checkpoint> {
    let tvs = task_vectors(base, finetuned)?;
    merge_task_vectors(base, &tvs, alphas, plans, opts)
}

/// Parameter-weighted mean density the plan assigns over `base`'s tensors.
pub fn planned_density(plan: &SparsityPlan, base: &Checkpoint, scheme: NamingScheme) -> Result<f64> {
    let (mut kept, mut total) = (0.0, 0usize);
    for (name, t) in &base.tensors {
        kept += plan.density_for(name, scheme.classify(name))? * t.len() as f64;
        total += t.len();
    }
    Ok(if total == 0 { 0.0 } else { kept / total as f64 })
}

pub struct MergeOutcome {
    pub merged: Checkpoint,
    pub model_ids: Vec<String>,
    pub plans: Vec<SparsityPlan>,
    /// Parameter-weighted planned density per model.
    pub densities: Vec<f64>,
}

/// Load everything a recipe names and merge it.
pub fn run_recipe(loaded: &LoadedRecipe) -> Result<MergeOutcome> {
    let recipe = &loaded.recipe;
    recipe.validate()?;
    let base = load_checkpoint(&recipe.base_path)?;
    let finetuned = recipe
        .model_paths
        .iter()
        .map(|p| Ok((model_id(p), load_checkpoint(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let plans = match &recipe.plan_refs {
        PlanRefs::Plans(paths) => paths.iter().map(read_plan).collect::<Result<Vec<_>>>()?,
        PlanRefs::Uniform(d) => finetuned
            .iter()
            .map(|(id, _)| Ok(build_plan_uniform(id, 0, *d)?))
            .collect::<Result<Vec<_>>>()?,
    };
    let opts = MergeOptions {
        method: recipe.method,
        seed: recipe.seed,
        scheme: loaded.naming_scheme,
    };
    let mut merged = merge_checkpoints(&base, &finetuned, &recipe.alphas, &plans, &opts)?;
    merged
        .metadata
        .insert("merge.naming_scheme".into(), loaded.naming_scheme.as_str().into());
    let densities = plans
        .iter()
        .map(|p| planned_density(p, &base, loaded.naming_scheme))
        .collect::<Result<Vec<_>>>()?;
    Ok(MergeOutcome {
        merged,
        model_ids: finetuned.into_iter().map(|(id, _)| id).collect(),
        plans,
        densities,
    })
}

/// Nonzero fraction of each tensor, keyed by name.
pub fn nonzero_fractions(ckpt: &Checkpoint) -> BTreeMap<String, f64> {
    ckpt.tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.count_nonzero() as f64 / t.len() as f64))
        .collect()
}
