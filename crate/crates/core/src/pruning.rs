//! Task-vector pruning: magnitude trimming and random drop-with-rescale.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::importance::SparsityPlan;
use crate::rng::{fnv1a64, uniform_at};
use crate::roles::NamingScheme;
use crate::task_vector::{Delta, TaskVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PruneMode {
    /// Keep the largest-magnitude entries.
    Magnitude,
    /// Keep each entry with probability `density`, rescaling survivors.
    Random,
}

pub fn check_density(density: f64) -> Result<()> {
    if density > 0.0 && density <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDensity(density))
    }
}

/// `ceil(density * n)`, clamped to `1..=n`.
///
/// Products within a relative `1e-9` of an integer snap to it, so that e.g.
/// `0.14 * 100` keeps 14 entries rather than 15.
pub fn keep_count(density: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = density * n as f64;
    let nearest = libm::round(x);
    let k = if libm::fabs(x - nearest) <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        libm::ceil(x)
    };
    (k as usize).clamp(1, n)
}

/// Zero all but the `keep_count(density, n)` largest-magnitude entries.
/// Among equal magnitudes the lower flat index wins. Survivors are untouched.
pub fn magnitude_trim(values: &[f64], density: f64) -> Result<Vec<f64>> {
    check_density(density)?;
    let n = values.len();
    let k = keep_count(density, n);
    if k == n {
        return Ok(values.to_vec());
    }
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then_with(|| a.cmp(&b))
    };
    order.select_nth_unstable_by(k - 1, by_rank);
    let mut out = alloc::vec![0.0; n];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    Ok(out)
}

/// Drop each entry independently with probability `1 - density` and scale the
/// survivors by `1 / density`.
///
/// The keep decision for entry `i` is drawn from the counter-based stream keyed
/// by `(seed, fnv1a64(tensor_name))` at counter `i`.
pub fn random_drop_rescale(values: &[f64], density: f64, seed: u64, tensor_name: &str) -> Result<Vec<f64>> {
    check_density(density)?;
    if density == 1.0 {
        return Ok(values.to_vec());
    }
    let key = fnv1a64(tensor_name.as_bytes());
    let scale = 1.0 / density;
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if uniform_at(seed, key, i as u64) < density {
                v * scale
            } else {
                0.0
            }
        })
        .collect())
}

/// Prune a single delta tensor at `density`.
pub fn prune_delta(name: &str, delta: &Delta, density: f64, mode: PruneMode, seed: u64) -> Result<Delta> {
    let data = match mode {
        PruneMode::Magnitude => magnitude_trim(&delta.data, density)?,
        PruneMode::Random => random_drop_rescale(&delta.data, density, seed, name)?,
    };
    Ok(Delta {
        shape: delta.shape.clone(),
        data,
    })
}

/// Prune every tensor of `tv` at the density the plan assigns to its role.
pub fn apply_plan(
    tv: &TaskVector,
    plan: &SparsityPlan,
    mode: PruneMode,
    scheme: NamingScheme,
    seed: u64,
) -> Result<TaskVector> {
    let deltas = tv
        .deltas
        .iter()
        .map(|(name, delta)| {
            let density = plan.density_for(name, scheme.classify(name))?;
            Ok((name.clone(), prune_delta(name, delta, density, mode, seed)?))
        })
        .collect::<Result<_>>()?;
    Ok(TaskVector {
        source_model_id: tv.source_model_id.clone(),
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{PlanMode, SparsityBounds};
    use alloc::collections::BTreeMap;
    use alloc::string::{String, ToString};
    use alloc::vec;

    #[test]
    fn trim_examples() {
        assert_eq!(magnitude_trim(&[0.1, -0.5, 0.3, 0.05], 0.5).unwrap(), vec![0.0, -0.5, 0.3, 0.0]);
        assert_eq!(magnitude_trim(&[2.0, -2.0, 1.0], 1.0 / 3.0).unwrap(), vec![2.0, 0.0, 0.0]);
        let v = [0.3, -0.1, 7.0];
        assert_eq!(magnitude_trim(&v, 1.0).unwrap(), v.to_vec());
    }

    #[test]
    fn trim_rejects_bad_density() {
        for d in [0.0, -0.1, 1.0001, f64::NAN] {
            assert!(matches!(magnitude_trim(&[1.0], d), Err(Error::InvalidDensity(_))));
            assert!(random_drop_rescale(&[1.0], d, 0, "t").is_err());
        }
    }

    #[test]
    fn keep_count_rounds_up_and_snaps() {
        assert_eq!(keep_count(0.5, 4), 2);
        assert_eq!(keep_count(0.5, 3), 2);
        assert_eq!(keep_count(0.14, 100), 14);
        assert_eq!(keep_count(1e-9, 10), 1);
        assert_eq!(keep_count(1.0, 7), 7);
    }

    #[test]
    fn drop_rescale_full_density_and_determinism() {
        let v: Vec<f64> = (0..64).map(|i| i as f64 - 30.0).collect();
        assert_eq!(random_drop_rescale(&v, 1.0, 99, "x").unwrap(), v);
        let a = random_drop_rescale(&v, 0.3, 5, "x").unwrap();
        let b = random_drop_rescale(&v, 0.3, 5, "x").unwrap();
        assert_eq!(a, b);
        let c = random_drop_rescale(&v, 0.3, 6, "x").unwrap();
        assert_ne!(a, c);
        for (o, i) in a.iter().zip(&v) {
            assert!(*o == 0.0 || (*o - i / 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn drop_rescale_is_unbiased_per_entry() {
        let v = [1.0; 8];
        let seeds = 10_000u64;
        let mut sums = [0.0f64; 8];
        for seed in 0..seeds {
            for (s, x) in sums.iter_mut().zip(random_drop_rescale(&v, 0.5, seed, "w").unwrap()) {
                *s += x;
            }
        }
        // each draw is 0 or 2: standard deviation 1, standard error 1/sqrt(seeds)
        let se = 1.0 / (seeds as f64).sqrt();
        for s in sums {
            let mean = s / seeds as f64;
            assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
        }
    }

    fn toy_tv() -> TaskVector {
        let mut deltas = BTreeMap::new();
        for name in ["blocks.0.attn.q.weight", "blocks.1.mlp.up.weight", "embed.weight"] {
            deltas.insert(
                name.to_string(),
                Delta {
                    shape: vec![10],
                    data: (1..=10).map(|i| i as f64 * 0.1).collect(),
                },
            );
        }
        TaskVector {
            source_model_id: "m".to_string(),
            deltas,
        }
    }

    fn plan(densities: &[(usize, f64)], default: Option<f64>) -> SparsityPlan {
        SparsityPlan {
            model_id: "m".into(),
            mode: PlanMode::Uniform,
            densities: densities.iter().copied().collect(),
            default_density: default,
            bounds: SparsityBounds::new(0.1, 1.0).unwrap(),
            role_overrides: BTreeMap::new(),
            provenance: BTreeMap::<String, String>::new(),
        }
    }

    #[test]
    fn apply_plan_per_block() {
        let tv = toy_tv();
        let p = plan(&[(0, 0.5), (1, 1.0)], Some(0.3));
        let out = apply_plan(&tv, &p, PruneMode::Magnitude, NamingScheme::Toy, 0).unwrap();
        assert_eq!(out.deltas["blocks.0.attn.q.weight"].count_nonzero(), 5);
        assert_eq!(out.deltas["blocks.1.mlp.up.weight"], tv.deltas["blocks.1.mlp.up.weight"]);
        assert_eq!(out.deltas["embed.weight"].count_nonzero(), 3);
    }

    #[test]
    fn apply_plan_identity_at_full_density() {
        let tv = toy_tv();
        let p = plan(&[(0, 1.0), (1, 1.0)], Some(1.0));
        for mode in [PruneMode::Magnitude, PruneMode::Random] {
            assert_eq!(apply_plan(&tv, &p, mode, NamingScheme::Toy, 3).unwrap(), tv);
        }
    }

    #[test]
    fn apply_plan_missing_density() {
        let tv = toy_tv();
        let p = plan(&[(0, 0.5)], None);
        assert!(matches!(
            apply_plan(&tv, &p, PruneMode::Magnitude, NamingScheme::Toy, 0),
            Err(Error::MissingDensity { block: Some(1), .. })
        ));
    }
}
