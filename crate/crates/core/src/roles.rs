//! Tensor-name classification into architectural roles.

use core::fmt;
use core::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleKind {
    Q,
    K,
    V,
    O,
    Mlp,
    Embedding,
    Norm,
    Head,
    Other,
}

impl RoleKind {
    /// The five weight kinds that live inside a transformer block.
    pub const BLOCK_KINDS: [RoleKind; 5] = [RoleKind::Q, RoleKind::K, RoleKind::V, RoleKind::O, RoleKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleKind::Q => "Q",
            RoleKind::K => "K",
            RoleKind::V => "V",
            RoleKind::O => "O",
            RoleKind::Mlp => "MLP",
            RoleKind::Embedding => "Embedding",
            RoleKind::Norm => "Norm",
            RoleKind::Head => "Head",
            RoleKind::Other => "Other",
        }
    }

    pub fn is_block_kind(self) -> bool {
        RoleKind::BLOCK_KINDS.contains(&self)
    }
}

impl fmt::Display for RoleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "q" => RoleKind::Q,
            "k" => RoleKind::K,
            "v" => RoleKind::V,
            "o" => RoleKind::O,
            "mlp" => RoleKind::Mlp,
            "embedding" => RoleKind::Embedding,
            "norm" => RoleKind::Norm,
            "head" => RoleKind::Head,
            "other" => RoleKind::Other,
            _ => {
                return Err(Error::UnknownName {
                    what: "role",
                    name: s.into(),
                })
            }
        })
    }
}

/// Architectural role of one tensor. Block kinds always carry a block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRole {
    pub block_index: Option<usize>,
    pub kind: RoleKind,
}

impl TensorRole {
    pub const OTHER: TensorRole = TensorRole {
        block_index: None,
        kind: RoleKind::Other,
    };

    fn global(kind: RoleKind) -> TensorRole {
        TensorRole { block_index: None, kind }
    }

    fn block(index: usize, kind: RoleKind) -> TensorRole {
        TensorRole {
            block_index: Some(index),
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NamingScheme {
    /// `model.layers.N.self_attn.q_proj.weight` and friends.
    LlamaStyle,
    /// Names produced by [`crate::runtime::ArchConfig`]: `blocks.N.attn.q.weight`.
    #[default]
    Toy,
}

impl NamingScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            NamingScheme::LlamaStyle => "llama-style",
            NamingScheme::Toy => "toy",
        }
    }

    pub fn classify(self, name: &str) -> TensorRole {
        match self {
            NamingScheme::LlamaStyle => classify_llama(name),
            NamingScheme::Toy => classify_toy(name),
        }
    }
}

impl fmt::Display for NamingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NamingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llama-style" | "llama" => Ok(NamingScheme::LlamaStyle),
            "toy" => Ok(NamingScheme::Toy),
            _ => Err(Error::UnknownName {
                what: "naming scheme",
                name: s.into(),
            }),
        }
    }
}

pub fn classify_tensor(name: &str, scheme: NamingScheme) -> TensorRole {
    scheme.classify(name)
}

/// Split `prefix.N.rest` into `(N, rest)`.
fn block_suffix<'a>(name: &'a str, prefix: &str) -> Option<(usize, &'a str)> {
    let rest = name.strip_prefix(prefix)?.strip_prefix('.')?;
    let (index, rest) = rest.split_once('.')?;
    if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((index.parse().ok()?, rest))
}

fn strip_param(rest: &str) -> Option<&str> {
    rest.strip_suffix(".weight").or_else(|| rest.strip_suffix(".bias"))
}

fn classify_llama(name: &str) -> TensorRole {
    match name {
        "model.embed_tokens.weight" => return TensorRole::global(RoleKind::Embedding),
        "model.norm.weight" => return TensorRole::global(RoleKind::Norm),
        "lm_head.weight" => return TensorRole::global(RoleKind::Head),
        _ => {}
    }
    let Some((block, rest)) = block_suffix(name, "model.layers") else {
        return TensorRole::OTHER;
    };
    let kind = match strip_param(rest) {
        Some("self_attn.q_proj") => RoleKind::Q,
        Some("self_attn.k_proj") => RoleKind::K,
        Some("self_attn.v_proj") => RoleKind::V,
        Some("self_attn.o_proj") => RoleKind::O,
        Some("mlp.gate_proj" | "mlp.up_proj" | "mlp.down_proj") => RoleKind::Mlp,
        Some(
            "input_layernorm"
            | "post_attention_layernorm"
            | "pre_feedforward_layernorm"
            | "post_feedforward_layernorm",
        ) => RoleKind::Norm,
        _ => return TensorRole::OTHER,
    };
    TensorRole::block(block, kind)
}

fn classify_toy(name: &str) -> TensorRole {
    match name {
        "embed.weight" | "pos_embed.weight" => return TensorRole::global(RoleKind::Embedding),
        "final_norm.weight" => return TensorRole::global(RoleKind::Norm),
        "head.weight" => return TensorRole::global(RoleKind::Head),
        _ => {}
    }
    let Some((block, rest)) = block_suffix(name, "blocks") else {
        return TensorRole::OTHER;
    };
    let kind = match strip_param(rest) {
        Some("attn.q") => RoleKind::Q,
        Some("attn.k") => RoleKind::K,
        Some("attn.v") => RoleKind::V,
        Some("attn.o") => RoleKind::O,
        Some("mlp.up" | "mlp.down") => RoleKind::Mlp,
        Some("attn_norm" | "mlp_norm") => RoleKind::Norm,
        _ => return TensorRole::OTHER,
    };
    TensorRole::block(block, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_examples() {
        let s = NamingScheme::LlamaStyle;
        assert_eq!(s.classify("model.layers.3.self_attn.q_proj.weight"), TensorRole::block(3, RoleKind::Q));
        assert_eq!(s.classify("model.layers.12.mlp.down_proj.weight"), TensorRole::block(12, RoleKind::Mlp));
        assert_eq!(s.classify("model.embed_tokens.weight"), TensorRole::global(RoleKind::Embedding));
        assert_eq!(s.classify("lm_head.weight"), TensorRole::global(RoleKind::Head));
        assert_eq!(s.classify("model.layers.x.self_attn.q_proj.weight"), TensorRole::OTHER);
        assert_eq!(s.classify("model.layers.2.rotary.inv_freq"), TensorRole::OTHER);
        assert_eq!(s.classify(""), TensorRole::OTHER);
    }

    #[test]
    fn toy_examples() {
        let s = NamingScheme::Toy;
        assert_eq!(s.classify("blocks.1.mlp.down.weight"), TensorRole::block(1, RoleKind::Mlp));
        assert_eq!(s.classify("blocks.0.attn.o.weight"), TensorRole::block(0, RoleKind::O));
        assert_eq!(s.classify("blocks.0.attn_norm.weight"), TensorRole::block(0, RoleKind::Norm));
        assert_eq!(s.classify("head.weight"), TensorRole::global(RoleKind::Head));
        assert_eq!(s.classify("blocks..attn.q.weight"), TensorRole::OTHER);
    }

    #[test]
    fn parse_names() {
        assert_eq!("llama-style".parse::<NamingScheme>().unwrap(), NamingScheme::LlamaStyle);
        assert!("gpt".parse::<NamingScheme>().is_err());
        assert_eq!("MLP".parse::<RoleKind>().unwrap(), RoleKind::Mlp);
        assert_eq!("q".parse::<RoleKind>().unwrap(), RoleKind::Q);
    }
}
