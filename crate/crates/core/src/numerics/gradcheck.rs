use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Checks at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares tape gradients of a scalar objective with central differences over every
/// trainable parameter entry.
///
/// The error per entry is `|analytic − numeric| / max(1, |analytic|)`; the report holds
/// the maximum. Parameter values are restored bit-exactly afterwards.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::dim("grad_check", v.shape(), &[1]));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        tape.backward(out)?.params().to_vec()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).numel();
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + opts.eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[e] = orig - opts.eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = grad[e];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), e));
            }
        }
    }
    Ok(report)
}
