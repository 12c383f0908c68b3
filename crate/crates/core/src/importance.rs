//! Layer importance from activation-norm deviations, and sparsity plans.
//!
//! A block whose mean activation norm in the fine-tuned model moves further
//! from the base model's is treated as more important and keeps a larger
//! fraction of its task vector. Raw deviations are mapped onto keep-densities
//! inside `[gamma, epsilon]`, either by the sum-normalize-and-clip rule
//! ([`NormalizeMode::Literal`]) or by an affine min/max stretch
//! ([`NormalizeMode::Minmax`]).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::pruning::check_density;
use crate::rng::fnv1a64;
use crate::roles::{RoleKind, TensorRole};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityBounds {
    pub gamma: f64,
    pub epsilon: f64,
}

impl SparsityBounds {
    pub fn new(gamma: f64, epsilon: f64) -> Result<SparsityBounds> {
        let bounds = SparsityBounds { gamma, epsilon };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma > 0.0 && self.gamma <= self.epsilon && self.epsilon <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidBounds {
                gamma: self.gamma,
                epsilon: self.epsilon,
            })
        }
    }

    pub fn contains(&self, density: f64) -> bool {
        density >= self.gamma && density <= self.epsilon
    }

    fn clip(&self, v: f64) -> f64 {
        v.max(self.gamma).min(self.epsilon)
    }
}

/// Mean activation norm per block for one model over a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub model_id: String,
    pub layer_norms: BTreeMap<usize, f64>,
    pub num_samples: usize,
    pub norm_convention: String,
}

impl ActivationProfile {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::EmptyInput("calibration sample count"));
        }
        if self.layer_norms.is_empty() {
            return Err(Error::EmptyInput("layer norm table"));
        }
        for (i, (&layer, &value)) in self.layer_norms.iter().enumerate() {
            if layer != i {
                return Err(Error::InvalidArch(format!(
                    "profile `{}` layer ids are not contiguous from 0 (found {layer} at position {i})",
                    self.model_id
                )));
            }
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidScore { layer, value });
            }
        }
        Ok(())
    }

    /// FNV-1a digest of the profile's canonical text form.
    pub fn digest(&self) -> String {
        let mut text = format!("{}|{}|{}", self.model_id, self.norm_convention, self.num_samples);
        for (l, v) in &self.layer_norms {
            text.push_str(&format!("|{l}:{:016x}", v.to_bits()));
        }
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub model_id: String,
    /// `|norm_model - norm_base|` per block.
    pub raw: BTreeMap<usize, f64>,
    /// Densities in `[gamma, epsilon]`; empty until normalized.
    pub normalized: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizeMode {
    /// Divide by the per-model sum of deviations, then clip.
    Literal,
    /// Affine map of `[min, max]` deviation onto `[gamma, epsilon]`.
    Minmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlanMode {
    LewisLiteral,
    LewisMinmax,
    Uniform,
    TopK,
    LayerType,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::LewisLiteral => "lewis-literal",
            PlanMode::LewisMinmax => "lewis-minmax",
            PlanMode::Uniform => "uniform",
            PlanMode::TopK => "topk",
            PlanMode::LayerType => "layer-type",
        }
    }

    pub fn is_lewis(self) -> bool {
        matches!(self, PlanMode::LewisLiteral | PlanMode::LewisMinmax)
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lewis-literal" => PlanMode::LewisLiteral,
            "lewis-minmax" => PlanMode::LewisMinmax,
            "uniform" => PlanMode::Uniform,
            "topk" => PlanMode::TopK,
            "layer-type" => PlanMode::LayerType,
            _ => {
                return Err(Error::UnknownName {
                    what: "plan mode",
                    name: s.into(),
                })
            }
        })
    }
}

/// Keep-density per block for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub model_id: String,
    pub mode: PlanMode,
    pub densities: BTreeMap<usize, f64>,
    /// Used for tensors outside any block, and for blocks missing from `densities`.
    pub default_density: Option<f64>,
    pub bounds: SparsityBounds,
    /// Per-role densities that take precedence over block densities.
    pub role_overrides: BTreeMap<RoleKind, f64>,
    pub provenance: BTreeMap<String, String>,
}

impl SparsityPlan {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let all = self
            .densities
            .values()
            .chain(self.default_density.iter())
            .chain(self.role_overrides.values());
        for &d in all {
            check_density(d)?;
        }
        if self.mode.is_lewis() {
            if let Some(&d) = self.densities.values().find(|d| !self.bounds.contains(**d)) {
                return Err(Error::InvalidDensity(d));
            }
        }
        Ok(())
    }

    /// Density for one tensor: role override, then block density, then default.
    pub fn density_for(&self, name: &str, role: TensorRole) -> Result<f64> {
        if let Some(&d) = self.role_overrides.get(&role.kind) {
            return Ok(d);
        }
        if let Some(block) = role.block_index {
            if let Some(&d) = self.densities.get(&block) {
                return Ok(d);
            }
        }
        self.default_density.ok_or_else(|| Error::MissingDensity {
            name: name.into(),
            block: role.block_index,
        })
    }

    /// Arithmetic mean of the block densities, if there are any.
    pub fn mean_density(&self) -> Option<f64> {
        mean(self.densities.values().copied())
    }

    /// FNV-1a digest of the plan's canonical text form.
    pub fn digest(&self) -> String {
        let mut text = format!(
            "{}|{}|{:016x}|{:016x}",
            self.model_id,
            self.mode,
            self.bounds.gamma.to_bits(),
            self.bounds.epsilon.to_bits()
        );
        if let Some(d) = self.default_density {
            text.push_str(&format!("|default:{:016x}", d.to_bits()));
        }
        for (l, d) in &self.densities {
            text.push_str(&format!("|{l}:{:016x}", d.to_bits()));
        }
        for (r, d) in &self.role_overrides {
            text.push_str(&format!("|{r}:{:016x}", d.to_bits()));
        }
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-block absolute deviation of the model's norms from the base's.
pub fn importance_deltas(model: &ActivationProfile, base: &ActivationProfile) -> Result<ImportanceScores> {
    if model.norm_convention != base.norm_convention {
        return Err(Error::ConventionMismatch {
            model: model.norm_convention.clone(),
            base: base.norm_convention.clone(),
        });
    }
    if !model.layer_norms.keys().eq(base.layer_norms.keys()) {
        return Err(Error::LayerSetMismatch {
            model_id: model.model_id.clone(),
            base_id: base.model_id.clone(),
        });
    }
    let raw = model
        .layer_norms
        .iter()
        .zip(base.layer_norms.values())
        .map(|((&l, &m), &b)| (l, libm::fabs(m - b)))
        .collect();
    Ok(ImportanceScores {
        model_id: model.model_id.clone(),
        raw,
        normalized: BTreeMap::new(),
    })
}

/// Map raw deviations to densities in `[gamma, epsilon]`.
///
/// Literal: `clip(raw / sum(raw))`, or `gamma` everywhere when the sum is 0.
/// Minmax: `gamma + (raw - min) / (max - min) * (epsilon - gamma)`, or the
/// midpoint when all raws are equal.
pub fn normalize_and_clip(
    raw: &BTreeMap<usize, f64>,
    bounds: SparsityBounds,
    mode: NormalizeMode,
) -> Result<BTreeMap<usize, f64>> {
    bounds.validate()?;
    for (&layer, &value) in raw {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidScore { layer, value });
        }
    }
    let out = match mode {
        NormalizeMode::Literal => {
            let total: f64 = raw.values().sum();
            raw.iter()
                .map(|(&l, &r)| {
                    let d = if total == 0.0 { bounds.gamma } else { bounds.clip(r / total) };
                    (l, d)
                })
                .collect()
        }
        NormalizeMode::Minmax => {
            let lo = raw.values().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.values().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = bounds.epsilon - bounds.gamma;
            raw.iter()
                .map(|(&l, &r)| {
                    let d = if hi > lo {
                        bounds.clip(bounds.gamma + (r - lo) / (hi - lo) * span)
                    } else {
                        bounds.clip((bounds.gamma + bounds.epsilon) / 2.0)
                    };
                    (l, d)
                })
                .collect()
        }
    };
    Ok(out)
}

/// Raw deviations plus their normalized densities.
pub fn score_profiles(
    model: &ActivationProfile,
    base: &ActivationProfile,
    bounds: SparsityBounds,
    mode: NormalizeMode,
) -> Result<ImportanceScores> {
    model.validate()?;
    base.validate()?;
    let mut scores = importance_deltas(model, base)?;
    scores.normalized = normalize_and_clip(&scores.raw, bounds, mode)?;
    Ok(scores)
}

pub fn build_plan_lewis(
    model: &ActivationProfile,
    base: &ActivationProfile,
    bounds: SparsityBounds,
    mode: NormalizeMode,
) -> Result<SparsityPlan> {
    let scores = score_profiles(model, base, bounds, mode)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("model_profile".to_string(), model.digest());
    provenance.insert("base_profile".to_string(), base.digest());
    let densities = scores.normalized;
    Ok(SparsityPlan {
        model_id: model.model_id.clone(),
        mode: match mode {
            NormalizeMode::Literal => PlanMode::LewisLiteral,
            NormalizeMode::Minmax => PlanMode::LewisMinmax,
        },
        default_density: mean(densities.values().copied()),
        densities,
        bounds,
        role_overrides: BTreeMap::new(),
        provenance,
    })
}

/// Every block at `density`; tensors outside blocks too.
pub fn build_plan_uniform(model_id: &str, num_blocks: usize, density: f64) -> Result<SparsityPlan> {
    check_density(density)?;
    Ok(SparsityPlan {
        model_id: model_id.to_string(),
        mode: PlanMode::Uniform,
        densities: (0..num_blocks).map(|l| (l, density)).collect(),
        default_density: Some(density),
        bounds: SparsityBounds::new(density, density)?,
        role_overrides: BTreeMap::new(),
        provenance: BTreeMap::new(),
    })
}

/// `ceil(k% * L)` blocks with the largest raw deviation get `hi`, the rest `lo`.
/// Equal deviations favour the lower block index.
pub fn build_plan_topk(scores: &ImportanceScores, k_percent: f64, hi: f64, lo: f64) -> Result<SparsityPlan> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidTopK(k_percent));
    }
    check_density(hi)?;
    check_density(lo)?;
    if scores.raw.is_empty() {
        return Err(Error::EmptyInput("importance scores"));
    }
    let layers = scores.raw.len();
    let selected = topk_count(k_percent, layers);
    let mut ranked: Vec<(usize, f64)> = scores.raw.iter().map(|(&l, &r)| (l, r)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let densities: BTreeMap<usize, f64> = ranked
        .iter()
        .enumerate()
        .map(|(rank, &(l, _))| (l, if rank < selected { hi } else { lo }))
        .collect();
    let mut provenance = BTreeMap::new();
    provenance.insert("k_percent".to_string(), format!("{k_percent}"));
    Ok(SparsityPlan {
        model_id: scores.model_id.clone(),
        mode: PlanMode::TopK,
        default_density: mean(densities.values().copied()),
        densities,
        bounds: SparsityBounds::new(lo.min(hi), lo.max(hi))?,
        role_overrides: BTreeMap::new(),
        provenance,
    })
}

/// Number of layers selected by a top-k% plan over `layers` blocks.
pub fn topk_count(k_percent: f64, layers: usize) -> usize {
    let x = k_percent * layers as f64 / 100.0;
    let nearest = libm::round(x);
    let n = if libm::fabs(x - nearest) <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        libm::ceil(x)
    };
    (n as usize).clamp(1, layers)
}

/// Keep `role` tensors at `hi` and every other block weight at `lo`.
pub fn build_plan_layer_type(model_id: &str, role: RoleKind, hi: f64, lo: f64) -> Result<SparsityPlan> {
    if !role.is_block_kind() {
        return Err(Error::UnknownName {
            what: "block role",
            name: role.as_str().into(),
        });
    }
    check_density(hi)?;
    check_density(lo)?;
    let role_overrides = RoleKind::BLOCK_KINDS
        .iter()
        .map(|&k| (k, if k == role { hi } else { lo }))
        .collect();
    let mut provenance = BTreeMap::new();
    provenance.insert("role".to_string(), role.as_str().to_string());
    Ok(SparsityPlan {
        model_id: model_id.to_string(),
        mode: PlanMode::LayerType,
        densities: BTreeMap::new(),
        default_density: Some(lo),
        bounds: SparsityBounds::new(lo.min(hi), lo.max(hi))?,
        role_overrides,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn profile(id: &str, norms: &[f64]) -> ActivationProfile {
        ActivationProfile {
            model_id: id.into(),
            layer_norms: norms.iter().copied().enumerate().collect(),
            num_samples: 15,
            norm_convention: "mean-token-l2".into(),
        }
    }

    fn raw(values: &[f64]) -> BTreeMap<usize, f64> {
        values.iter().copied().enumerate().collect()
    }

    #[test]
    fn deltas_examples() {
        let s = importance_deltas(&profile("a", &[5.0, 2.0]), &profile("b", &[3.0, 3.0])).unwrap();
        assert_eq!(s.raw, raw(&[2.0, 1.0]));
        let s = importance_deltas(&profile("a", &[5.0, 2.0]), &profile("a", &[5.0, 2.0])).unwrap();
        assert!(s.raw.values().all(|v| *v == 0.0));
    }

    #[test]
    fn deltas_errors() {
        let mut other = profile("b", &[3.0, 3.0]);
        other.norm_convention = "frobenius".into();
        assert!(matches!(
            importance_deltas(&profile("a", &[1.0, 1.0]), &other),
            Err(Error::ConventionMismatch { .. })
        ));
        assert!(matches!(
            importance_deltas(&profile("a", &[1.0, 1.0]), &profile("b", &[1.0])),
            Err(Error::LayerSetMismatch { .. })
        ));
    }

    #[test]
    fn literal_and_minmax_examples() {
        let b = SparsityBounds::new(0.3, 0.8).unwrap();
        let lit = normalize_and_clip(&raw(&[2.0, 3.0, 5.0]), b, NormalizeMode::Literal).unwrap();
        assert_eq!(lit.values().copied().collect::<Vec<_>>(), vec![0.3, 0.3, 0.5]);
        let mm = normalize_and_clip(&raw(&[2.0, 3.0, 5.0]), b, NormalizeMode::Minmax).unwrap();
        let expected = [0.3, 0.3 + 0.5 / 3.0, 0.8];
        for (got, want) in mm.values().zip(expected) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!((mm[&1] - 0.4667).abs() < 1e-4);
    }

    #[test]
    fn degenerate_inputs() {
        let b = SparsityBounds::new(0.3, 0.8).unwrap();
        let lit = normalize_and_clip(&raw(&[0.0, 0.0, 0.0]), b, NormalizeMode::Literal).unwrap();
        assert!(lit.values().all(|d| *d == 0.3));
        let mm = normalize_and_clip(&raw(&[4.0, 4.0]), b, NormalizeMode::Minmax).unwrap();
        assert!(mm.values().all(|d| (*d - 0.55).abs() < 1e-12));
        assert!(normalize_and_clip(&raw(&[-1.0]), b, NormalizeMode::Literal).is_err());
    }

    #[test]
    fn bounds_validation() {
        assert!(SparsityBounds::new(0.0, 0.5).is_err());
        assert!(SparsityBounds::new(0.6, 0.5).is_err());
        assert!(SparsityBounds::new(0.5, 1.1).is_err());
        assert!(SparsityBounds::new(0.5, 0.5).is_ok());
        assert!(SparsityBounds::new(0.5, 0.8).is_ok());
        assert!(SparsityBounds::new(0.3, 0.8).is_ok());
    }

    #[test]
    fn lewis_plan_prefers_dominant_layer() {
        let base = profile("base", &[1.0, 1.0, 1.0, 1.0]);
        let model = profile("ft", &[1.1, 4.0, 1.2, 0.9]);
        let b = SparsityBounds::new(0.5, 0.8).unwrap();
        for mode in [NormalizeMode::Literal, NormalizeMode::Minmax] {
            let plan = build_plan_lewis(&model, &base, b, mode).unwrap();
            plan.validate().unwrap();
            let max = plan.densities.values().copied().fold(0.0, f64::max);
            assert_eq!(plan.densities[&1], max);
            let mean = plan.densities.values().sum::<f64>() / 4.0;
            assert_eq!(plan.default_density, Some(mean));
            assert!(plan.provenance.contains_key("model_profile"));
        }
    }

    #[test]
    fn topk_examples() {
        let scores = ImportanceScores {
            model_id: "m".into(),
            raw: raw(&[5.0, 2.0, 3.0, 1.0]),
            normalized: BTreeMap::new(),
        };
        let plan = build_plan_topk(&scores, 50.0, 1.0, 0.1).unwrap();
        assert_eq!(plan.densities, [(0, 1.0), (1, 0.1), (2, 1.0), (3, 0.1)].into_iter().collect());
        let plan = build_plan_topk(&scores, 100.0, 1.0, 0.1).unwrap();
        assert!(plan.densities.values().all(|d| *d == 1.0));
        let plan = build_plan_topk(&scores, 70.0, 1.0, 0.1).unwrap();
        assert_eq!(plan.densities.values().filter(|d| **d == 1.0).count(), 3);
        assert!(build_plan_topk(&scores, 0.0, 1.0, 0.1).is_err());
        assert!(build_plan_topk(&scores, 101.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let scores = ImportanceScores {
            model_id: "m".into(),
            raw: raw(&[1.0, 1.0, 1.0, 1.0]),
            normalized: BTreeMap::new(),
        };
        let plan = build_plan_topk(&scores, 50.0, 1.0, 0.1).unwrap();
        assert_eq!(plan.densities[&0], 1.0);
        assert_eq!(plan.densities[&1], 1.0);
        assert_eq!(plan.densities[&2], 0.1);
    }

    #[test]
    fn layer_type_plan() {
        let plan = build_plan_layer_type("m", RoleKind::Mlp, 1.0, 0.01).unwrap();
        let role = |kind, block| TensorRole { block_index: block, kind };
        assert_eq!(plan.density_for("x", role(RoleKind::Mlp, Some(0))).unwrap(), 1.0);
        assert_eq!(plan.density_for("x", role(RoleKind::Q, Some(3))).unwrap(), 0.01);
        assert_eq!(plan.density_for("x", role(RoleKind::Norm, Some(3))).unwrap(), 0.01);
        assert!(build_plan_layer_type("m", RoleKind::Embedding, 1.0, 0.01).is_err());
        let flat = build_plan_layer_type("m", RoleKind::Q, 0.2, 0.2).unwrap();
        assert!(RoleKind::BLOCK_KINDS
            .iter()
            .all(|&k| flat.density_for("x", role(k, Some(0))).unwrap() == 0.2));
    }

    #[test]
    fn digest_changes_with_content() {
        let p = build_plan_uniform("m", 4, 0.5).unwrap();
        let mut q = p.clone();
        assert_eq!(p.digest(), q.digest());
        q.densities.insert(2, 0.6);
        assert_ne!(p.digest(), q.digest());
    }
}
