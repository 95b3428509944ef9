//! Adapter modules inserted after backbone blocks: the plain bottleneck adapter and the
//! multimodal gated adapter (MGA) whose parameters are shared by the image and text
//! streams at the same depth.

mod mga;
mod vanilla;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use mga::{mga_forward, mga_stream, mmsa, MgaParams, MgaShape, MmsAdapterParams, GATE_INIT};
pub use vanilla::{vanilla_adapter, AdapterParams};

use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, ParamId, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    None,
    Vanilla,
    Mga,
}

impl FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "vanilla" => Ok(Self::Vanilla),
            "mga" => Ok(Self::Mga),
            _ => Err(Error::Config(format!("unknown adapter kind `{s}`"))),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Vanilla => "vanilla",
            Self::Mga => "mga",
        })
    }
}

/// Which depths receive an adapter. The same depths apply to both towers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttachPolicy {
    All,
    /// The topmost `k` layers.
    Top(usize),
    Layers(Vec<usize>),
}

impl AttachPolicy {
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let layers = match self {
            Self::All => (0..depth).collect(),
            Self::Top(k) => {
                if *k > depth {
                    return Err(Error::Config(format!("top:{k} exceeds {depth} layers")));
                }
                (depth - k..depth).collect()
            }
            Self::Layers(ls) => {
                let mut ls = ls.clone();
                ls.sort_unstable();
                ls.dedup();
                if let Some(&bad) = ls.iter().find(|&&l| l >= depth) {
                    return Err(Error::Config(format!(
                        "adapter layer {bad} out of range for {depth} layers"
                    )));
                }
                ls
            }
        };
        Ok(layers)
    }
}

impl FromStr for AttachPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" {
            return Ok(Self::All);
        }
        if s.is_empty() || s == "none" {
            return Ok(Self::Layers(Vec::new()));
        }
        if let Some(k) = s.strip_prefix("top:") {
            return k
                .parse()
                .map(Self::Top)
                .map_err(|_| Error::Config(format!("bad attachment policy `{s}`")));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Self::Layers)
            .map_err(|_| Error::Config(format!("bad attachment policy `{s}`")))
    }
}

impl fmt::Display for AttachPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Top(k) => write!(f, "top:{k}"),
            Self::Layers(ls) if ls.is_empty() => f.write_str("none"),
            Self::Layers(ls) => {
                let parts: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// How the adapter attention is shared between the `f2` and `f4` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsaSharing {
    /// One attention block at both positions.
    Single,
    /// One block per position; each still shared across modalities.
    PerPosition,
}

impl FromStr for MsaSharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "per_position" => Ok(Self::PerPosition),
            _ => Err(Error::Config(format!("unknown msa sharing `{s}`"))),
        }
    }
}

impl fmt::Display for MsaSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::PerPosition => "per_position",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub policy: AttachPolicy,
    pub bottleneck: usize,
    pub mms_bottleneck: usize,
    pub heads: usize,
    pub mms_heads: usize,
    pub sigmoid_gates: bool,
    pub msa_sharing: MsaSharing,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Mga,
            policy: AttachPolicy::All,
            bottleneck: 16,
            mms_bottleneck: 8,
            heads: 2,
            mms_heads: 2,
            sigmoid_gates: false,
            msa_sharing: MsaSharing::Single,
        }
    }
}

/// The adapter occupying one depth of the dual encoder.
#[derive(Clone, Debug)]
pub enum AdapterSlot {
    /// Independent bottleneck adapters per tower.
    Vanilla {
        image: AdapterParams,
        text: AdapterParams,
    },
    /// One gated adapter applied to both towers.
    Mga(MgaParams),
}

impl AdapterSlot {
    pub fn is_mga(&self) -> bool {
        matches!(self, Self::Mga(_))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Self::Vanilla { image, text } => {
                let mut ids = image.ids();
                ids.extend(text.ids());
                ids
            }
            Self::Mga(p) => p.ids(),
        }
    }

    pub fn apply_image(&self, tape: &mut Tape, x: Var, seq: usize) -> Result<Var> {
        match self {
            Self::Vanilla { image, .. } => {
                let a = vanilla_adapter(tape, x, image)?;
                tape.add(x, a)
            }
            Self::Mga(p) => mga_stream(tape, x, p, seq, AttnMask::None),
        }
    }

    pub fn apply_text(&self, tape: &mut Tape, x: Var, seq: usize) -> Result<Var> {
        match self {
            Self::Vanilla { text, .. } => {
                let a = vanilla_adapter(tape, x, text)?;
                tape.add(x, a)
            }
            Self::Mga(p) => mga_stream(tape, x, p, seq, AttnMask::Causal),
        }
    }
}

/// Closed-form parameter count of one MGA.
pub fn mga_param_count(width: usize, cfg: &AdapterConfig) -> usize {
    let (d, r, r2) = (width, cfg.bottleneck, cfg.mms_bottleneck);
    let msa = |w: usize| 4 * (w * w + w);
    let attn_blocks = match cfg.msa_sharing {
        MsaSharing::Single => 1,
        MsaSharing::PerPosition => 2,
    };
    (d * r + r) + (r * d + d) + attn_blocks * msa(r) + (r * r2 + r2) + msa(r2) + (r2 * r + r) + 2
}

/// Closed-form parameter count of one vanilla slot (two towers).
pub fn vanilla_param_count(image_width: usize, text_width: usize, bottleneck: usize) -> usize {
    let one = |d: usize| (d * bottleneck + bottleneck) + (bottleneck * d + d);
    one(image_width) + one(text_width)
}

/// Attaches adapters at the depths named by `cfg.policy`. MGA parameters at one depth are
/// shared by both towers; different depths get independent instances.
pub fn attach_adapters(model: &mut DualEncoder, cfg: &AdapterConfig, seed: u64) -> Result<()> {
    if model.has_adapters() {
        return Err(Error::Config("model already has adapters attached".into()));
    }
    if cfg.kind == AdapterKind::None {
        return Ok(());
    }
    let shared_depth = model.image.blocks.len().min(model.text.blocks.len());
    let layers = cfg.policy.resolve(shared_depth)?;
    let (di, dt) = (model.image.cfg.embed_dim, model.text.cfg.embed_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e45);
    for l in layers {
        let slot = match cfg.kind {
            AdapterKind::Mga => {
                if di != dt {
                    return Err(Error::Config(format!(
                        "shared MGA needs equal tower widths, got {di} and {dt}"
                    )));
                }
                let shape = MgaShape {
                    width: di,
                    bottleneck: cfg.bottleneck,
                    mms_bottleneck: cfg.mms_bottleneck,
                    heads: cfg.heads,
                    mms_heads: cfg.mms_heads,
                };
                AdapterSlot::Mga(MgaParams::new(
                    &mut model.store,
                    &format!("mga.{l}"),
                    shape,
                    cfg.msa_sharing == MsaSharing::PerPosition,
                    cfg.sigmoid_gates,
                    &mut rng,
                )?)
            }
            AdapterKind::Vanilla => {
                for d in [di, dt] {
                    if cfg.bottleneck == 0 || cfg.bottleneck >= d {
                        return Err(Error::Config(format!(
                            "adapter bottleneck {} must satisfy 0 < r < {d}",
                            cfg.bottleneck
                        )));
                    }
                }
                AdapterSlot::Vanilla {
                    image: AdapterParams::new(
                        &mut model.store,
                        &format!("adapter.{l}.image"),
                        di,
                        cfg.bottleneck,
                        &mut rng,
                    )?,
                    text: AdapterParams::new(
                        &mut model.store,
                        &format!("adapter.{l}.text"),
                        dt,
                        cfg.bottleneck,
                        &mut rng,
                    )?,
                }
            }
            AdapterKind::None => unreachable!(),
        };
        model.adapters[l] = Some(slot);
    }
    model.adapter_config = Some(cfg.clone());
    Ok(())
}
