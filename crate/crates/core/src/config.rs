//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapters::{AdapterConfig, AdapterKind, AttachPolicy, MsaSharing};
use crate::datagen::{SplitCounts, RESERVED};
use crate::encoders::{ImageEncoderConfig, ModelConfig, PretrainConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::training::{FinetuneConfig, FreezeMode, FreezePolicy};

/// A value that can live in a config file.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! display_fromstr_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| Error::Config(format!("`{s}`: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_fromstr_value!(u64, usize, f64, bool, AdapterKind, AttachPolicy, MsaSharing, FreezeMode);

/// Comma-separated list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NameList(pub Vec<String>);

impl ConfigValue for NameList {
    fn parse_value(s: &str) -> Result<Self> {
        Ok(Self(
            s.split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(String::from)
                .collect(),
        ))
    }
    fn render(&self) -> String {
        self.0.join(",")
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form; unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value.trim())
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// All keys with their rendered values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), ConfigValue::render(&self.$key)),)*]
            }
        }
    };
}

run_config! {
    seed: u64 = 0,

    n_pretrain: usize = 2048,
    n_finetune_train: usize = 512,
    n_finetune_val: usize = 128,
    n_finetune_test: usize = 256,

    image_size: usize = 32,
    channels: usize = 3,
    patch_grid: usize = 4,
    embed_dim: usize = 64,
    layers: usize = 4,
    heads: usize = 4,
    mlp_ratio: usize = 4,
    vocab_size: usize = 512,
    max_len: usize = 16,
    text_embed_dim: usize = 64,
    text_layers: usize = 4,
    text_heads: usize = 4,
    proj_dim: usize = 64,

    adapter_kind: AdapterKind = AdapterKind::Mga,
    /// `all`, `top:K`, `none` or a comma list of depths.
    adapter_layers: AttachPolicy = AttachPolicy::All,
    adapter_bottleneck: usize = 16,
    mms_bottleneck: usize = 8,
    adapter_heads: usize = 2,
    mms_heads: usize = 2,
    gate_sigmoid: bool = false,
    msa_sharing: MsaSharing = MsaSharing::Single,

    margin: f64 = 0.2,
    gamma: f64 = 2.0,
    tau: f64 = 0.07,
    alpha_triplet: f64 = 1.0,
    alpha_contrastive: f64 = 1.0,
    aux_weight: f64 = 0.1,
    detach_weights: bool = false,

    /// Learning rate for adapter fine-tuning.
    lr: f64 = 2e-3,
    weight_decay: f64 = 0.04,
    epochs: usize = 20,
    batch_size: usize = 32,
    grad_clip: f64 = 0.0,
    freeze_mode: FreezeMode = FreezeMode::AdaptersOnly,
    trainable_prefixes: NameList = NameList::default(),
    k_folds: usize = 1,

    /// Learning rate of the full fine-tuning baseline.
    full_ft_lr: f64 = 4e-4,

    pretrain_steps: usize = 500,
    pretrain_lr: f64 = 5e-4,

    uniformity_t: f64 = 2.0,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            pretrain: self.n_pretrain,
            finetune_train: self.n_finetune_train,
            finetune_val: self.n_finetune_val,
            finetune_test: self.n_finetune_test,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image: ImageEncoderConfig {
                image_size: self.image_size,
                channels: self.channels,
                patch_grid: self.patch_grid,
                embed_dim: self.embed_dim,
                layers: self.layers,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                proj_dim: self.proj_dim,
            },
            text: TextEncoderConfig {
                vocab_size: self.vocab_size,
                max_len: self.max_len,
                embed_dim: self.text_embed_dim,
                layers: self.text_layers,
                heads: self.text_heads,
                mlp_ratio: self.mlp_ratio,
                proj_dim: self.proj_dim,
            },
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            kind: self.adapter_kind,
            policy: self.adapter_layers.clone(),
            bottleneck: self.adapter_bottleneck,
            mms_bottleneck: self.mms_bottleneck,
            heads: self.adapter_heads,
            mms_heads: self.mms_heads,
            sigmoid_gates: self.gate_sigmoid,
            msa_sharing: self.msa_sharing,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            gamma: self.gamma,
            tau: self.tau,
            alpha_triplet: self.alpha_triplet,
            alpha_contrastive: self.alpha_contrastive,
            aux_weight: self.aux_weight,
            detach_weights: self.detach_weights,
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        FreezePolicy {
            mode: self.freeze_mode,
            trainable_prefixes: self.trainable_prefixes.0.clone(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
            loss: self.loss_config(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.batch_size,
            lr: self.pretrain_lr,
            weight_decay: self.weight_decay,
            tau: self.tau,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        if self.vocab_size <= RESERVED {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.k_folds == 0 {
            return Err(Error::Config("k_folds must be at least 1".into()));
        }
        if self.adapter_kind != AdapterKind::None {
            let width = self.embed_dim.min(self.text_embed_dim);
            if self.adapter_bottleneck == 0 || self.adapter_bottleneck >= width {
                return Err(Error::Config(format!(
                    "adapter_bottleneck {} must be in 1..{width}",
                    self.adapter_bottleneck
                )));
            }
        }
        if !(self.lr >= 0.0 && self.pretrain_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}
