//! Retrieval objectives over an image–text similarity matrix.
//!
//! `S[i][j]` scores image `i` against caption `j`; the diagonal holds the positive
//! pairs. Every loss is available as a plain function of `S` and as a tape node whose
//! gradient with respect to `S` is computed alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Maximum tolerated deviation of a row norm from 1 in [`similarity_matrix`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    /// Focusing exponent of the hardness weights.
    pub gamma: f64,
    pub tau: f64,
    pub alpha_triplet: f64,
    pub alpha_contrastive: f64,
    /// Weight of the per-layer early matching terms.
    pub aux_weight: f64,
    /// Treat hardness weights as constants in the backward pass.
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            gamma: 2.0,
            tau: 0.07,
            alpha_triplet: 1.0,
            alpha_contrastive: 1.0,
            aux_weight: 0.1,
            detach_weights: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for (name, w) in [
            ("alpha_triplet", self.alpha_triplet),
            ("alpha_contrastive", self.alpha_contrastive),
            ("aux_weight", self.aux_weight),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-component values of [`total_loss`], weighted as they enter the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub contrastive: f64,
    pub aux: f64,
}

/// `S = V·Tᵀ` for row-normalized `V` and `T`.
pub fn similarity_matrix(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    if v.shape().len() != 2 || t.shape().len() != 2 || v.cols() != t.cols() {
        return Err(Error::dim("similarity_matrix", v.shape(), t.shape()));
    }
    for (name, m) in [("image", v), ("text", t)] {
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Input(format!(
                    "{name} embedding row {i} has norm {n}, expected unit norm"
                )));
            }
        }
    }
    v.matmul(&t.transpose())
}

fn check_square(s: &Tensor) -> Result<usize> {
    if s.shape().len() != 2 || s.rows() != s.cols() {
        return Err(Error::dim("similarity loss", s.shape(), &[s.rows(), s.rows()]));
    }
    Ok(s.rows())
}

/// Hardness weight `(1 − e^{−h})^γ`, defined as 0 at `h = 0`.
pub fn adaptive_weight(hinge: f64, gamma: f64) -> f64 {
    if hinge <= 0.0 {
        0.0
    } else {
        (1.0 - (-hinge).exp()).powf(gamma)
    }
}

/// `d/dh [w(h)·h]`, optionally holding `w` fixed.
fn weighted_hinge_slope(h: f64, gamma: f64, detach: bool) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    let w = adaptive_weight(h, gamma);
    if detach || gamma == 0.0 {
        return w;
    }
    let base = 1.0 - (-h).exp();
    w + h * gamma * base.powf(gamma - 1.0) * (-h).exp()
}

/// Shared loop for both triplet variants. Returns the value and `∂L/∂S`.
fn triplet_core(
    s: &Tensor,
    margin: f64,
    weight: impl Fn(f64) -> f64,
    slope: impl Fn(f64) -> f64,
) -> Result<(f64, Tensor)> {
    let n = check_square(s)?;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    let mut grad = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let pos = s.at(i, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            // image i against caption j
            let h = (margin + s.at(i, j) - pos).max(0.0);
            i2t += weight(h) * h;
            let d = 0.5 * slope(h);
            if d != 0.0 {
                grad.set(i, j, grad.at(i, j) + d);
                grad.set(i, i, grad.at(i, i) - d);
            }
            // caption i against image j
            let h = (margin + s.at(j, i) - pos).max(0.0);
            t2i += weight(h) * h;
            let d = 0.5 * slope(h);
            if d != 0.0 {
                grad.set(j, i, grad.at(j, i) + d);
                grad.set(i, i, grad.at(i, i) - d);
            }
        }
    }
    Ok((0.5 * (i2t + t2i), grad))
}

/// Bidirectional hinge triplet loss summed over all off-diagonal negatives.
pub fn triplet_loss(s: &Tensor, margin: f64) -> Result<f64> {
    triplet_loss_with_grad(s, margin).map(|(v, _)| v)
}

pub fn triplet_loss_with_grad(s: &Tensor, margin: f64) -> Result<(f64, Tensor)> {
    triplet_core(
        s,
        margin,
        |h| if h > 0.0 { 1.0 } else { 0.0 },
        |h| if h > 0.0 { 1.0 } else { 0.0 },
    )
}

/// Triplet loss with each active hinge scaled by its hardness weight.
pub fn adaptive_triplet_loss(s: &Tensor, margin: f64, gamma: f64) -> Result<f64> {
    adaptive_triplet_loss_with_grad(s, margin, gamma, false).map(|(v, _)| v)
}

pub fn adaptive_triplet_loss_with_grad(
    s: &Tensor,
    margin: f64,
    gamma: f64,
    detach_weights: bool,
) -> Result<(f64, Tensor)> {
    triplet_core(
        s,
        margin,
        |h| adaptive_weight(h, gamma),
        |h| weighted_hinge_slope(h, gamma, detach_weights),
    )
}

/// Symmetric InfoNCE: mean of the image→text and text→image cross-entropies of
/// `softmax(S/τ)` at the diagonal.
pub fn contrastive_loss(s: &Tensor, tau: f64) -> Result<f64> {
    contrastive_loss_with_grad(s, tau).map(|(v, _)| v)
}

pub fn contrastive_loss_with_grad(s: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    let n = check_square(s)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let mut grad = Tensor::zeros(&[n, n]);
    let mut v2t = 0.0;
    let mut t2v = 0.0;
    let coef = 0.5 / (n as f64 * tau);
    let mut buf = vec![0.0; n];
    for i in 0..n {
        // row i: image i over all captions
        for (j, b) in buf.iter_mut().enumerate() {
            *b = s.at(i, j) / tau;
        }
        v2t += log_sum_exp(&buf) - buf[i];
        crate::numerics::softmax_in_place(&mut buf);
        for (j, p) in buf.iter().enumerate() {
            let d = coef * (p - if j == i { 1.0 } else { 0.0 });
            grad.set(i, j, grad.at(i, j) + d);
        }
        // column i: caption i over all images
        for (j, b) in buf.iter_mut().enumerate() {
            *b = s.at(j, i) / tau;
        }
        t2v += log_sum_exp(&buf) - buf[i];
        crate::numerics::softmax_in_place(&mut buf);
        for (j, p) in buf.iter().enumerate() {
            let d = coef * (p - if j == i { 1.0 } else { 0.0 });
            grad.set(j, i, grad.at(j, i) + d);
        }
    }
    let value = 0.5 * (v2t / n as f64 + t2v / n as f64);
    Ok((value, grad))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Weighted sum of the adaptive triplet, contrastive and auxiliary contrastive terms.
pub fn total_loss(s: &Tensor, aux: &[Tensor], cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let triplet = cfg.alpha_triplet * adaptive_triplet_loss(s, cfg.margin, cfg.gamma)?;
    let contrastive = cfg.alpha_contrastive * contrastive_loss(s, cfg.tau)?;
    let mut aux_sum = 0.0;
    for a in aux {
        aux_sum += contrastive_loss(a, cfg.tau)?;
    }
    let aux = cfg.aux_weight * aux_sum;
    Ok(LossBreakdown {
        total: triplet + contrastive + aux,
        triplet,
        contrastive,
        aux,
    })
}

/// Tape node for the adaptive triplet loss of similarity matrix `s`.
pub fn adaptive_triplet_node(tape: &mut Tape, s: Var, cfg: &LossConfig) -> Result<Var> {
    let (v, g) =
        adaptive_triplet_loss_with_grad(tape.value(s), cfg.margin, cfg.gamma, cfg.detach_weights)?;
    tape.scalar_fn(s, v, g)
}

pub fn contrastive_node(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    let (v, g) = contrastive_loss_with_grad(tape.value(s), tau)?;
    tape.scalar_fn(s, v, g)
}

/// [`total_loss`] recorded on a tape. Terms with zero weight are left out of the graph.
pub fn total_loss_node(
    tape: &mut Tape,
    s: Var,
    aux: &[Var],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let mut terms = Vec::new();
    let mut out = LossBreakdown::default();
    if cfg.alpha_triplet > 0.0 {
        let t = adaptive_triplet_node(tape, s, cfg)?;
        out.triplet = cfg.alpha_triplet * tape.value(t).item();
        terms.push((t, cfg.alpha_triplet));
    }
    if cfg.alpha_contrastive > 0.0 {
        let c = contrastive_node(tape, s, cfg.tau)?;
        out.contrastive = cfg.alpha_contrastive * tape.value(c).item();
        terms.push((c, cfg.alpha_contrastive));
    }
    if cfg.aux_weight > 0.0 {
        for &a in aux {
            let c = contrastive_node(tape, a, cfg.tau)?;
            out.aux += cfg.aux_weight * tape.value(c).item();
            terms.push((c, cfg.aux_weight));
        }
    }
    let total = tape.weighted_sum(terms)?;
    out.total = tape.value(total).item();
    Ok((total, out))
}
