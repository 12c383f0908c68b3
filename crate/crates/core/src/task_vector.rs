//! Task vectors and the final `base + sum(alpha * delta)` assembly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::merge::MergeMethod;
use crate::tensor::{ensure_same_layout, Checkpoint, Tensor};

/// One tensor's parameter difference.
///
/// Deltas are kept in `f64`: the difference of two `f32` values with nearby
/// exponents is exact there, so `base + delta` recovers the fine-tuned value
/// bit for bit after narrowing.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Delta {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub source_model_id: String,
    pub deltas: BTreeMap<String, Delta>,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Option<&Delta> {
        self.deltas.get(name)
    }

    /// Fraction of nonzero entries over the whole vector.
    pub fn density(&self) -> f64 {
        let total: usize = self.deltas.values().map(Delta::len).sum();
        if total == 0 {
            return 0.0;
        }
        let nonzero: usize = self.deltas.values().map(Delta::count_nonzero).sum();
        nonzero as f64 / total as f64
    }

    pub(crate) fn ensure_matches(&self, base: &Checkpoint) -> Result<()> {
        ensure_same_layout(
            base.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())),
            self.deltas.iter().map(|(n, d)| (n.as_str(), d.shape.as_slice())),
        )
    }
}

/// `finetuned - base`, tensor by tensor.
pub fn compute_task_vector(base: &Checkpoint, finetuned: &Checkpoint, model_id: &str) -> Result<TaskVector> {
    base.ensure_compatible(finetuned)?;
    let deltas = base
        .tensors
        .iter()
        .map(|(name, b)| {
            let f = &finetuned.tensors[name];
            let data = f
                .data()
                .iter()
                .zip(b.data())
                .map(|(&fv, &bv)| f64::from(fv) - f64::from(bv))
                .collect();
            (
                name.clone(),
                Delta {
                    shape: b.shape().to_vec(),
                    data,
                },
            )
        })
        .collect();
    Ok(TaskVector {
        source_model_id: model_id.to_string(),
        deltas,
    })
}

/// Compute `base[t] + sum_p alphas[p] * deltas[p][t]` for one tensor, in `f64`.
pub(crate) fn combine_tensor(name: &str, base: &Tensor, contribution: &[f64]) -> Result<Tensor> {
    let data: Vec<f32> = base
        .data()
        .iter()
        .zip(contribution)
        .map(|(&b, &d)| (f64::from(b) + d) as f32)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: name.into() });
    }
    let out = Tensor::new(base.dtype(), base.shape().to_vec(), data)?;
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: name.into() });
    }
    Ok(out)
}

pub(crate) fn check_alphas(alphas: &[f64], models: usize) -> Result<()> {
    if alphas.len() != models {
        return Err(Error::CountMismatch {
            what: "scaling coefficients",
            expected: models,
            found: alphas.len(),
        });
    }
    match alphas.iter().find(|a| !a.is_finite()) {
        Some(&a) => Err(Error::InvalidAlpha(a)),
        None => Ok(()),
    }
}

/// Plain weighted sum of (already pruned) task vectors onto the base.
///
/// Inputs are not modified. The result keeps each base tensor's dtype and
/// records the contributing model ids and coefficients in its metadata.
pub fn assemble_merged(base: &Checkpoint, pruned: &[TaskVector], alphas: &[f64]) -> Result<Checkpoint> {
    if pruned.is_empty() {
        return Err(Error::EmptyInput("task vector list"));
    }
    check_alphas(alphas, pruned.len())?;
    for tv in pruned {
        tv.ensure_matches(base)?;
    }
    let mut merged = Checkpoint::new();
    for (name, b) in &base.tensors {
        let mut acc = alloc::vec![0.0f64; b.len()];
        for (tv, &alpha) in pruned.iter().zip(alphas) {
            for (a, d) in acc.iter_mut().zip(&tv.deltas[name].data) {
                *a += alpha * d;
            }
        }
        merged.insert(name.clone(), combine_tensor(name, b, &acc)?);
    }
    merged.metadata = provenance(pruned, alphas);
    Ok(merged)
}

pub(crate) fn provenance(tvs: &[TaskVector], alphas: &[f64]) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    let ids: Vec<&str> = tvs.iter().map(|tv| tv.source_model_id.as_str()).collect();
    meta.insert("merge.models".to_string(), ids.join(","));
    let alphas: Vec<String> = alphas.iter().map(|a| format!("{a}")).collect();
    meta.insert("merge.alphas".to_string(), alphas.join(","));
    meta
}

/// Where per-model densities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanRefs {
    /// One plan file per model, in model order.
    Plans(Vec<String>),
    /// The same density for every tensor of every model.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecipe {
    pub base_path: String,
    pub model_paths: Vec<String>,
    pub alphas: Vec<f64>,
    pub method: MergeMethod,
    pub plan_refs: PlanRefs,
    pub seed: u64,
}

impl MergeRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.model_paths.is_empty() {
            return Err(Error::EmptyInput("model list"));
        }
        check_alphas(&self.alphas, self.model_paths.len())?;
        match &self.plan_refs {
            PlanRefs::Uniform(d) => crate::pruning::check_density(*d),
            PlanRefs::Plans(p) if p.len() != self.model_paths.len() => Err(Error::CountMismatch {
                what: "plans",
                expected: self.model_paths.len(),
                found: p.len(),
            }),
            PlanRefs::Plans(_) => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use alloc::vec;

    fn ckpt(values: &[f32]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new(DType::F32, vec![values.len()], values.to_vec()).unwrap());
        c
    }

    fn tv(id: &str, values: &[f64]) -> TaskVector {
        let mut deltas = BTreeMap::new();
        deltas.insert(
            "w".to_string(),
            Delta {
                shape: vec![values.len()],
                data: values.to_vec(),
            },
        );
        TaskVector {
            source_model_id: id.to_string(),
            deltas,
        }
    }

    #[test]
    fn identity_gives_zero_vector() {
        let base = ckpt(&[1.0, -2.0, 3.5]);
        let tv = compute_task_vector(&base, &base, "same").unwrap();
        assert!(tv.deltas["w"].data.iter().all(|v| *v == 0.0));
        assert_eq!(tv.source_model_id, "same");
    }

    #[test]
    fn simple_difference() {
        let tv = compute_task_vector(&ckpt(&[1.0, 2.0]), &ckpt(&[1.5, 1.0]), "ft").unwrap();
        assert_eq!(tv.deltas["w"].data, vec![0.5, -1.0]);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let mut other = ckpt(&[1.0, 2.0]);
        other.insert("extra", Tensor::zeros(DType::F32, vec![1]).unwrap());
        assert!(matches!(
            compute_task_vector(&ckpt(&[1.0, 2.0]), &other, "x"),
            Err(Error::KeysetMismatch { .. })
        ));
        assert!(matches!(
            compute_task_vector(&ckpt(&[1.0, 2.0]), &ckpt(&[1.0]), "x"),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn assemble_examples() {
        let base = ckpt(&[1.0]);
        let out = assemble_merged(&base, &[tv("a", &[0.2])], &[1.0]).unwrap();
        assert_eq!(out.tensors["w"].data(), &[1.2f32]);
        let out = assemble_merged(&base, &[tv("a", &[0.2])], &[0.5]).unwrap();
        assert_eq!(out.tensors["w"].data(), &[1.1f32]);
        let out = assemble_merged(&base, &[tv("a", &[0.2]), tv("b", &[-0.2])], &[1.0, 1.0]).unwrap();
        assert_eq!(out.tensors["w"].data(), &[1.0f32]);
        assert_eq!(out.metadata["merge.models"], "a,b");
    }

    #[test]
    fn assemble_errors() {
        let base = ckpt(&[1.0]);
        assert!(matches!(
            assemble_merged(&base, &[tv("a", &[0.2])], &[1.0, 2.0]),
            Err(Error::CountMismatch { .. })
        ));
        assert!(matches!(
            assemble_merged(&base, &[tv("a", &[0.2])], &[f64::NAN]),
            Err(Error::InvalidAlpha(_))
        ));
        assert!(matches!(
            assemble_merged(&base, &[tv("a", &[1e300])], &[1e300]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            assemble_merged(&base, &[tv("a", &[0.2, 0.1])], &[1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn recipe_validation() {
        let mut r = MergeRecipe {
            base_path: "base".into(),
            model_paths: vec!["a".into()],
            alphas: vec![1.0],
            method: MergeMethod::Ties,
            plan_refs: PlanRefs::Uniform(0.5),
            seed: 0,
        };
        assert!(r.validate().is_ok());
        r.plan_refs = PlanRefs::Uniform(0.0);
        assert!(r.validate().is_err());
        r.plan_refs = PlanRefs::Plans(vec![]);
        assert!(r.validate().is_err());
        r.plan_refs = PlanRefs::Uniform(1.0);
        r.alphas = vec![f64::INFINITY];
        assert!(r.validate().is_err());
        r.model_paths.clear();
        assert!(r.validate().is_err());
    }
}
