//! File formats: architecture, calibration sets, activation profiles,
//! sparsity plans, merge recipes and the JSON tensor fixture format.
//!
//! Machine-written files (profiles, plans) are pretty-printed JSON with keys
//! in a fixed order, so equal values produce byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lewis_core::importance::SparsityPlan;
use lewis_core::runtime::tokenize;
use lewis_core::{
    ActivationProfile, ArchConfig, CalibrationSet, Checkpoint, DType, MergeMethod, MergeRecipe, NamingScheme,
    PlanMode, PlanRefs, RoleKind, SparsityBounds, Tensor,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    #[serde(default = "default_vocab")]
    vocab_size: usize,
    hidden_dim: usize,
    num_blocks: usize,
    num_heads: usize,
    mlp_dim: usize,
    max_seq_len: usize,
    #[serde(default = "default_scheme")]
    naming_scheme: String,
}

fn default_vocab() -> usize {
    256
}

fn default_scheme() -> String {
    NamingScheme::Toy.as_str().into()
}

pub fn read_arch(path: impl AsRef<Path>) -> Result<ArchConfig> {
    let path = path.as_ref();
    let f: ArchFile = parse_json(path)?;
    let arch = ArchConfig {
        vocab_size: f.vocab_size,
        hidden_dim: f.hidden_dim,
        num_blocks: f.num_blocks,
        num_heads: f.num_heads,
        mlp_dim: f.mlp_dim,
        max_seq_len: f.max_seq_len,
        naming_scheme: f.naming_scheme.parse()?,
    };
    arch.validate()?;
    Ok(arch)
}

pub fn write_arch(arch: &ArchConfig, path: impl AsRef<Path>) -> Result<()> {
    let f = ArchFile {
        vocab_size: arch.vocab_size,
        hidden_dim: arch.hidden_dim,
        num_blocks: arch.num_blocks,
        num_heads: arch.num_heads,
        mlp_dim: arch.mlp_dim,
        max_seq_len: arch.max_seq_len,
        naming_scheme: arch.naming_scheme.as_str().into(),
    };
    write_json(&f, path.as_ref())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum CalibRecord {
    Text { text: String },
    Tokens { tokens: Vec<u32> },
}

/// One JSON record per line: `{"text": ...}` or `{"tokens": [...]}`.
/// Text is byte-tokenized and truncated to `max_seq_len`; token lists are
/// validated as given.
pub fn read_calibration(path: impl AsRef<Path>, arch: &ArchConfig) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let mut samples = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CalibRecord =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        samples.push(match record {
            CalibRecord::Text { text } => tokenize(text.as_bytes(), arch.max_seq_len)?,
            CalibRecord::Tokens { tokens } => tokens,
        });
    }
    let set = CalibrationSet {
        samples,
        source: path.display().to_string(),
    };
    set.validate(arch)?;
    Ok(set)
}

pub fn write_calibration(set: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in &set.samples {
        let line = serde_json::to_string(&CalibRecord::Tokens { tokens: s.clone() }).map_err(|e| Error::format(path, e))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    model_id: String,
    norm_convention: String,
    num_samples: usize,
    layer_norms: BTreeMap<usize, f64>,
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<ActivationProfile> {
    let path = path.as_ref();
    let f: ProfileFile = parse_json(path)?;
    let profile = ActivationProfile {
        model_id: f.model_id,
        layer_norms: f.layer_norms,
        num_samples: f.num_samples,
        norm_convention: f.norm_convention,
    };
    profile.validate()?;
    Ok(profile)
}

pub fn write_profile(profile: &ActivationProfile, path: impl AsRef<Path>) -> Result<()> {
    let f = ProfileFile {
        model_id: profile.model_id.clone(),
        norm_convention: profile.norm_convention.clone(),
        num_samples: profile.num_samples,
        layer_norms: profile.layer_norms.clone(),
    };
    write_json(&f, path.as_ref())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    model_id: String,
    mode: String,
    bounds: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default_density: Option<f64>,
    densities: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    role_overrides: BTreeMap<String, f64>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

pub fn read_plan(path: impl AsRef<Path>) -> Result<SparsityPlan> {
    let path = path.as_ref();
    let f: PlanFile = parse_json(path)?;
    let role_overrides = f
        .role_overrides
        .iter()
        .map(|(k, v)| Ok((k.parse::<RoleKind>()?, *v)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let plan = SparsityPlan {
        model_id: f.model_id,
        mode: f.mode.parse::<PlanMode>()?,
        densities: f.densities,
        default_density: f.default_density,
        bounds: SparsityBounds {
            gamma: f.bounds[0],
            epsilon: f.bounds[1],
        },
        role_overrides,
        provenance: f.provenance,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn write_plan(plan: &SparsityPlan, path: impl AsRef<Path>) -> Result<()> {
    let f = PlanFile {
        model_id: plan.model_id.clone(),
        mode: plan.mode.as_str().into(),
        bounds: [plan.bounds.gamma, plan.bounds.epsilon],
        default_density: plan.default_density,
        densities: plan.densities.clone(),
        role_overrides: plan
            .role_overrides
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), *v))
            .collect(),
        provenance: plan.provenance.clone(),
    };
    write_json(&f, path.as_ref())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeFile {
    base_path: String,
    model_paths: Vec<String>,
    #[serde(default)]
    alphas: Option<Vec<f64>>,
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    plans: Option<Vec<String>>,
    #[serde(default)]
    density: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    naming_scheme: Option<String>,
}

/// A recipe with every path resolved against the recipe file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecipe {
    pub recipe: MergeRecipe,
    pub naming_scheme: NamingScheme,
}

/// Read a TOML merge recipe.
///
/// Exactly one of `plans` (one plan file per model) or `density` (uniform)
/// may be given; with neither, every model merges at density 1.
/// Missing `alphas` default to 1.0 and a missing `method` to `ties`.
pub fn read_recipe(path: impl AsRef<Path>) -> Result<LoadedRecipe> {
    let path = path.as_ref();
    let f: RecipeFile = toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| -> String {
        let p = Path::new(p);
        if p.is_absolute() {
            p.display().to_string()
        } else {
            dir.join(p).display().to_string()
        }
    };
    let plan_refs = match (f.plans, f.density) {
        (Some(_), Some(_)) => return Err(Error::format(path, "give either `plans` or `density`, not both")),
        (Some(plans), None) => PlanRefs::Plans(plans.iter().map(|p| resolve(p)).collect()),
        (None, Some(d)) => PlanRefs::Uniform(d),
        (None, None) => PlanRefs::Uniform(1.0),
    };
    let recipe = MergeRecipe {
        base_path: resolve(&f.base_path),
        alphas: f.alphas.unwrap_or_else(|| vec![1.0; f.model_paths.len()]),
        model_paths: f.model_paths.iter().map(|p| resolve(p)).collect(),
        method: f.method.as_deref().unwrap_or("ties").parse::<MergeMethod>()?,
        plan_refs,
        seed: f.seed,
    };
    recipe.validate()?;
    let naming_scheme = f.naming_scheme.as_deref().unwrap_or("toy").parse()?;
    Ok(LoadedRecipe { recipe, naming_scheme })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureTensor {
    dtype: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, FixtureTensor>,
}

/// Human-readable JSON checkpoint for small test fixtures:
/// `{"metadata": {...}, "tensors": {"w": {"dtype": "F32", "shape": [2], "data": [1.0, 2.0]}}}`.
pub fn read_fixture(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f: FixtureFile = parse_json(path)?;
    let mut ckpt = Checkpoint::new();
    ckpt.metadata = f.metadata;
    for (name, t) in f.tensors {
        let dtype = DType::parse(&t.dtype).ok_or_else(|| Error::UnknownDType {
            name: name.clone(),
            dtype: t.dtype.clone(),
        })?;
        let tensor = Tensor::new(dtype, t.shape, t.data).map_err(|e| Error::InvalidEntry {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        ckpt.insert(name, tensor);
    }
    Ok(ckpt)
}

pub fn write_fixture(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let f = FixtureFile {
        metadata: ckpt.metadata.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    FixtureTensor {
                        dtype: t.dtype().as_str().into(),
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect(),
    };
    write_json(&f, path.as_ref())
}

/// Load a checkpoint by extension: `.json` fixtures, anything else safetensors.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "json") {
        read_fixture(path)
    } else {
        crate::safetensors::read_checkpoint(path)
    }
}

/// Model identifier derived from a checkpoint path: its file stem.
pub fn model_id(path: impl AsRef<Path>) -> String {
    let path: PathBuf = path.as_ref().into();
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lewis_core::importance::{build_plan_layer_type, build_plan_uniform};

    #[test]
    fn plan_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        for plan in [
            build_plan_uniform("m", 3, 0.5).unwrap(),
            build_plan_layer_type("m", RoleKind::Mlp, 1.0, 0.01).unwrap(),
        ] {
            write_plan(&plan, &path).unwrap();
            assert_eq!(read_plan(&path).unwrap(), plan);
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"role_overrides\""));
        assert!(text.contains("\"MLP\": 1.0"));
    }

    #[test]
    fn plan_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(&path, r#"{"model_id":"m","mode":"uniform","bounds":[0.5,0.5],"densities":{"0":1.5}}"#).unwrap();
        assert!(read_plan(&path).is_err());
        fs::write(&path, r#"{"model_id":"m","mode":"lewis-literal","bounds":[0.5,0.8],"densities":{"0":0.9}}"#).unwrap();
        assert!(read_plan(&path).is_err());
        fs::write(&path, r#"{"model_id":"m","mode":"bogus","bounds":[0.5,0.8],"densities":{}}"#).unwrap();
        assert!(read_plan(&path).is_err());
    }

    #[test]
    fn profile_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let profile = ActivationProfile {
            model_id: "m".into(),
            layer_norms: [(0, 1.25), (1, 0.1 + 0.2)].into_iter().collect(),
            num_samples: 15,
            norm_convention: "mean-token-l2".into(),
        };
        write_profile(&profile, &path).unwrap();
        assert_eq!(read_profile(&path).unwrap(), profile);
        fs::write(&path, r#"{"model_id":"m","norm_convention":"x","num_samples":1,"layer_norms":{"0":1.0,"2":1.0}}"#).unwrap();
        assert!(read_profile(&path).is_err());
    }

    #[test]
    fn calibration_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let arch = ArchConfig { max_seq_len: 4, ..ArchConfig::default() };
        fs::write(&path, "{\"text\": \"Hi\"}\n\n{\"tokens\": [1, 2, 3]}\n{\"text\": \"truncated\"}\n").unwrap();
        let set = read_calibration(&path, &arch).unwrap();
        assert_eq!(set.samples, vec![vec![72, 105], vec![1, 2, 3], b"trun".iter().map(|&b| u32::from(b)).collect()]);
        fs::write(&path, "{\"tokens\": [1, 2, 3, 4, 5]}\n").unwrap();
        assert!(read_calibration(&path, &arch).is_err());
        fs::write(&path, "{\"tokens\": [300]}\n").unwrap();
        assert!(read_calibration(&path, &arch).is_err());
        fs::write(&path, "{\"words\": \"x\"}\n").unwrap();
        assert!(read_calibration(&path, &arch).is_err());
        fs::write(&path, "\n").unwrap();
        assert!(read_calibration(&path, &arch).is_err());
    }

    #[test]
    fn recipe_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recipe.toml");
        fs::write(
            &path,
            "base_path = \"base.safetensors\"\nmodel_paths = [\"a.safetensors\", \"/abs/b.safetensors\"]\nmethod = \"dare-ties\"\nplans = [\"a.json\", \"b.json\"]\nseed = 7\n",
        )
        .unwrap();
        let loaded = read_recipe(&path).unwrap();
        let r = loaded.recipe;
        assert_eq!(r.base_path, dir.path().join("base.safetensors").display().to_string());
        assert_eq!(r.model_paths[1], "/abs/b.safetensors");
        assert_eq!(r.alphas, vec![1.0, 1.0]);
        assert_eq!(r.method, MergeMethod::DareTies);
        assert_eq!(r.seed, 7);
        assert!(matches!(r.plan_refs, PlanRefs::Plans(ref p) if p.len() == 2));
        assert_eq!(loaded.naming_scheme, NamingScheme::Toy);

        fs::write(&path, "base_path = \"b\"\nmodel_paths = [\"a\"]\ndensity = 0.5\nplans = [\"x\"]\n").unwrap();
        assert!(read_recipe(&path).is_err());
        fs::write(&path, "base_path = \"b\"\nmodel_paths = [\"a\"]\nalphas = [1.0, 2.0]\n").unwrap();
        assert!(read_recipe(&path).is_err());
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new(DType::F16, vec![3], vec![0.1, -2.5, 1e-3]).unwrap());
        c.metadata.insert("k".into(), "v".into());
        write_fixture(&c, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bitwise_eq(&c));
    }

    #[test]
    fn arch_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.json");
        write_arch(&ArchConfig::default(), &path).unwrap();
        assert_eq!(read_arch(&path).unwrap(), ArchConfig::default());
        fs::write(&path, r#"{"hidden_dim": 10, "num_blocks": 1, "num_heads": 3, "mlp_dim": 4, "max_seq_len": 8}"#).unwrap();
        assert!(read_arch(&path).is_err());
    }

    #[test]
    fn model_ids_from_paths() {
        assert_eq!(model_id("/x/y/ft_a.safetensors"), "ft_a");
        assert_eq!(model_id("base"), "base");
    }
}
