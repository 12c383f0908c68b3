use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use lewis::formats::{
    load_checkpoint, model_id, read_arch, read_calibration, read_profile, read_recipe, write_arch, write_calibration,
    write_plan, write_profile, LoadedRecipe,
};
use lewis::pipeline::{nonzero_fractions, run_recipe};
use lewis::toy::{build_experiment, ToyConfig};
use lewis::write_checkpoint;
use lewis_core::importance::{
    build_plan_layer_type, build_plan_lewis, build_plan_topk, build_plan_uniform, importance_deltas, NormalizeMode,
    SparsityPlan,
};
use lewis_core::runtime::{eval_loss, profile_model};
use lewis_core::task_vector::compute_task_vector;
use lewis_core::{MergeMethod, MergeRecipe, NamingScheme, NormConvention, PlanRefs, RoleKind, SparsityBounds};

#[derive(Parser)]
#[command(name = "lewis", version, about = "Activation-guided layer-wise sparsity for model merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a calibration set through a model and record per-block activation norms.
    Capture {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mean-token-l2")]
        convention: String,
        /// Defaults to the model file stem.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Build a sparsity plan.
    Plan {
        #[arg(long, value_enum, default_value = "lewis-literal")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Fine-tuned model profile (lewis and topk modes).
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Base model profile (lewis and topk modes).
        #[arg(long)]
        base_profile: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 0.8)]
        epsilon: f64,
        /// Percentage of blocks kept at --hi (topk mode).
        #[arg(long)]
        k: Option<f64>,
        /// Preserved role: q, k, v, o or mlp (layer-type mode).
        #[arg(long)]
        role: Option<String>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        lo: Option<f64>,
        /// Keep-density for uniform mode.
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        /// Block count for uniform mode when no profile is given.
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Merge fine-tuned checkpoints onto a base.
    Merge {
        /// TOML recipe; replaces the inline flags below.
        #[arg(long, conflicts_with_all = ["base", "model", "alpha", "plan", "density"])]
        recipe: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        model: Vec<PathBuf>,
        #[arg(long)]
        alpha: Vec<f64>,
        #[arg(long, default_value = "ties")]
        method: String,
        /// One plan per --model, in order.
        #[arg(long, conflicts_with = "density")]
        plan: Vec<PathBuf>,
        /// Uniform density when no plans are given.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        naming_scheme: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List tensors with roles, shapes, dtypes and nonzero fractions.
    Inspect {
        path: PathBuf,
        /// Report the nonzero fractions of `path - base` instead.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        naming_scheme: String,
    },
    /// Mean next-token cross-entropy on a calibration set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        calib: PathBuf,
    },
    /// Write a synthetic base, two fine-tunes, an arch file and a calibration set.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    LewisLiteral,
    LewisMinmax,
    Uniform,
    Topk,
    LayerType,
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Capture {
            model,
            arch,
            calib,
            out,
            convention,
            model_id: id,
        } => {
            let arch = read_arch(&arch)?;
            let calib = read_calibration(&calib, &arch)?;
            let ckpt = load_checkpoint(&model)?;
            let convention: NormConvention = convention.parse()?;
            let id = id.unwrap_or_else(|| model_id(&model));
            let profile = profile_model(&ckpt, &arch, &calib, convention, &id)?;
            write_profile(&profile, &out)?;
            println!("model {id}  samples {}  convention {}", profile.num_samples, profile.norm_convention);
            println!("{:>6}  {:>14}", "block", "mean norm");
            for (l, v) in &profile.layer_norms {
                println!("{l:>6}  {v:>14.6}");
            }
        }
        Command::Plan {
            mode,
            out,
            profile,
            base_profile,
            gamma,
            epsilon,
            k,
            role,
            hi,
            lo,
            density,
            blocks,
            model_id: id,
        } => {
            let load_profiles = || -> Result<_> {
                let (Some(p), Some(b)) = (&profile, &base_profile) else {
                    usage_error("this mode needs --profile and --base-profile");
                };
                Ok((read_profile(p)?, read_profile(b)?))
            };
            let plan: SparsityPlan = match mode {
                Mode::LewisLiteral | Mode::LewisMinmax => {
                    let (p, b) = load_profiles()?;
                    let bounds = SparsityBounds::new(gamma, epsilon)?;
                    let normalize = match mode {
                        Mode::LewisLiteral => NormalizeMode::Literal,
                        _ => NormalizeMode::Minmax,
                    };
                    build_plan_lewis(&p, &b, bounds, normalize)?
                }
                Mode::Uniform => {
                    let (id, layers) = match &profile {
                        Some(p) => {
                            let p = read_profile(p)?;
                            (p.model_id.clone(), p.layer_norms.len())
                        }
                        None => (String::from("model"), blocks.unwrap_or(0)),
                    };
                    build_plan_uniform(&id, layers, density)?
                }
                Mode::Topk => {
                    let Some(k) = k else { usage_error("topk mode needs --k") };
                    let (p, b) = load_profiles()?;
                    build_plan_topk(&importance_deltas(&p, &b)?, k, hi.unwrap_or(1.0), lo.unwrap_or(0.1))?
                }
                Mode::LayerType => {
                    let Some(role) = role else { usage_error("layer-type mode needs --role") };
                    let role: RoleKind = role.parse()?;
                    let id = id.clone().unwrap_or_else(|| "model".into());
                    build_plan_layer_type(&id, role, hi.unwrap_or(1.0), lo.unwrap_or(0.01))?
                }
            };
            let mut plan = plan;
            if let Some(id) = id {
                plan.model_id = id;
            }
            write_plan(&plan, &out)?;
            println!(
                "plan {}  mode {}  bounds [{}, {}]",
                plan.model_id, plan.mode, plan.bounds.gamma, plan.bounds.epsilon
            );
            println!("{:>8}  {:>8}", "block", "density");
            for (l, d) in &plan.densities {
                println!("{l:>8}  {d:>8.4}");
            }
            for (r, d) in &plan.role_overrides {
                println!("{:>8}  {d:>8.4}", r.as_str());
            }
            if let Some(d) = plan.default_density {
                println!("{:>8}  {d:>8.4}", "default");
            }
        }
        Command::Merge {
            recipe,
            base,
            model,
            alpha,
            method,
            plan,
            density,
            seed,
            naming_scheme,
            out,
        } => {
            let loaded = match recipe {
                Some(path) => read_recipe(&path).with_context(|| format!("reading recipe {}", path.display()))?,
                None => {
                    let Some(base) = base else { usage_error("merge needs --recipe or --base") };
                    if model.is_empty() {
                        usage_error("merge needs at least one --model");
                    }
                    let alphas = if alpha.is_empty() { vec![1.0; model.len()] } else { alpha };
                    let plan_refs = if plan.is_empty() {
                        PlanRefs::Uniform(density.unwrap_or(1.0))
                    } else {
                        PlanRefs::Plans(plan.iter().map(|p| p.display().to_string()).collect())
                    };
                    let recipe = MergeRecipe {
                        base_path: base.display().to_string(),
                        model_paths: model.iter().map(|p| p.display().to_string()).collect(),
                        alphas,
                        method: method.parse::<MergeMethod>()?,
                        plan_refs,
                        seed,
                    };
                    recipe.validate()?;
                    LoadedRecipe {
                        recipe,
                        naming_scheme: naming_scheme.parse::<NamingScheme>()?,
                    }
                }
            };
            let outcome = run_recipe(&loaded)?;
            write_checkpoint(&outcome.merged, &out)?;
            println!(
                "method {}  tensors {}  parameters {}  seed {}",
                loaded.recipe.method,
                outcome.merged.len(),
                outcome.merged.num_parameters(),
                loaded.recipe.seed
            );
            println!("{:<24}  {:>8}  {:>12}  plan", "model", "alpha", "mean density");
            for (((id, a), d), p) in outcome
                .model_ids
                .iter()
                .zip(&loaded.recipe.alphas)
                .zip(&outcome.densities)
                .zip(&outcome.plans)
            {
                println!("{id:<24}  {a:>8}  {d:>12.4}  {}", p.mode);
            }
        }
        Command::Inspect {
            path,
            base,
            naming_scheme,
        } => {
            let scheme: NamingScheme = naming_scheme.parse()?;
            let ckpt = load_checkpoint(&path)?;
            let fractions = match &base {
                Some(base) => {
                    let tv = compute_task_vector(&load_checkpoint(base)?, &ckpt, &model_id(&path))?;
                    tv.deltas
                        .iter()
                        .map(|(n, d)| (n.clone(), d.count_nonzero() as f64 / d.len() as f64))
                        .collect()
                }
                None => nonzero_fractions(&ckpt),
            };
            inspect_table(&path, &ckpt, &fractions, scheme, base.as_deref());
        }
        Command::Eval { model, arch, calib } => {
            let arch = read_arch(&arch)?;
            let calib = read_calibration(&calib, &arch)?;
            let ckpt = load_checkpoint(&model)?;
            let loss = eval_loss(&ckpt, &arch, &calib)?;
            println!("model {}  samples {}  mean cross-entropy {loss:.6}", model_id(&model), calib.len());
        }
        Command::Toy { out, seed } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ex = build_experiment(seed, &ToyConfig::default())?;
            write_checkpoint(&ex.base, out.join("base.safetensors"))?;
            for (id, ckpt) in &ex.finetunes {
                write_checkpoint(ckpt, out.join(format!("{id}.safetensors")))?;
            }
            write_arch(&ex.arch, out.join("arch.json"))?;
            write_calibration(&ex.calibration, out.join("calib.jsonl"))?;
            println!(
                "wrote base.safetensors, a.safetensors (blocks 0-1), b.safetensors (blocks 2-3), arch.json, calib.jsonl ({} samples) to {}",
                ex.calibration.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn inspect_table(
    path: &Path,
    ckpt: &lewis_core::Checkpoint,
    fractions: &std::collections::BTreeMap<String, f64>,
    scheme: NamingScheme,
    base: Option<&Path>,
) {
    println!("{}  tensors {}  parameters {}", path.display(), ckpt.len(), ckpt.num_parameters());
    if let Some(base) = base {
        println!("nonzero fractions are of the difference from {}", base.display());
    }
    println!("{:<40}  {:<10}  {:>5}  {:<14}  {:>6}  {:>8}", "name", "role", "block", "shape", "dtype", "nonzero");
    for (name, t) in &ckpt.tensors {
        let role = scheme.classify(name);
        let block = role.block_index.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{name:<40}  {:<10}  {block:>5}  {:<14}  {:>6}  {:>8.4}",
            role.kind.as_str(),
            format!("{:?}", t.shape()),
            t.dtype().as_str(),
            fractions[name]
        );
    }
    for (k, v) in &ckpt.metadata {
        println!("meta {k} = {v}");
    }
}
