use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeMode {
    FullFt,
    AdaptersOnly,
}

impl FromStr for FreezeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" => Ok(Self::FullFt),
            "adapters_only" => Ok(Self::AdaptersOnly),
            _ => Err(Error::Config(format!("unknown freeze mode `{s}`"))),
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullFt => "full_ft",
            Self::AdaptersOnly => "adapters_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
    /// Extra name prefixes made trainable on top of `mode`.
    pub trainable_prefixes: Vec<String>,
}

impl FreezePolicy {
    pub fn new(mode: FreezeMode) -> Self {
        Self {
            mode,
            trainable_prefixes: Vec::new(),
        }
    }
}

/// Sets every trainable flag from `policy`.
pub fn apply_freeze(model: &mut DualEncoder, policy: &FreezePolicy) -> Result<()> {
    for prefix in &policy.trainable_prefixes {
        if !model.store.iter().any(|(_, p)| p.name.starts_with(prefix.as_str())) {
            return Err(Error::Config(format!("trainable prefix `{prefix}` matches no parameter")));
        }
    }
    for (_, p) in model.store.iter_mut() {
        let base = match policy.mode {
            FreezeMode::FullFt => true,
            FreezeMode::AdaptersOnly => !DualEncoder::is_backbone(&p.name),
        };
        p.trainable = base
            || policy
                .trainable_prefixes
                .iter()
                .any(|pre| p.name.starts_with(pre.as_str()));
    }
    if model.store.trainable_numel() == 0 {
        return Err(Error::Config(format!(
            "freeze mode {} leaves no trainable parameters (no adapters attached?)",
            policy.mode
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub percent: f64,
}

pub fn count_trainable(store: &ParamStore) -> ParamCount {
    let trainable = store.trainable_numel();
    let total = store.total_numel();
    ParamCount {
        trainable,
        total,
        percent: if total == 0 { 0.0 } else { 100.0 * trainable as f64 / total as f64 },
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::ModelConfig;
    use crate::numerics::Linear;

    #[test]
    fn mixed_linear_count() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut s, "a", 8, 4, &mut rng).unwrap();
        let b = Linear::new(&mut s, "b", 4, 2, &mut rng).unwrap();
        s.set_all_trainable(false);
        for id in b.ids() {
            s.get_mut(id).trainable = true;
        }
        let c = count_trainable(&s);
        assert_eq!((c.trainable, c.total), (10, 46));
        assert!((c.percent - 21.739130).abs() < 1e-5);
    }

    #[test]
    fn adapters_only_without_adapters_is_an_error() {
        let mut m = DualEncoder::new(ModelConfig::tiny(), 0).unwrap();
        let err = apply_freeze(&mut m, &FreezePolicy::new(FreezeMode::AdaptersOnly));
        assert!(matches!(err, Err(Error::Config(_))));
        apply_freeze(&mut m, &FreezePolicy::new(FreezeMode::FullFt)).unwrap();
        assert_eq!(count_trainable(&m.store).percent, 100.0);
    }

    #[test]
    fn unmatched_prefix_is_an_error() {
        let mut m = DualEncoder::new(ModelConfig::tiny(), 0).unwrap();
        let policy = FreezePolicy {
            mode: FreezeMode::FullFt,
            trainable_prefixes: vec!["nothing.".into()],
        };
        assert!(apply_freeze(&mut m, &policy).is_err());
    }
}
