//! Finite-difference checks over every differentiable op, the adapters, the losses and the
//! end-to-end model objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{
    attach_adapters, mga_forward, mmsa, vanilla_adapter, AdapterConfig, AdapterParams, AttachPolicy, MgaParams,
    MgaShape, MmsAdapterParams,
};
use crate::encoders::{DualEncoder, ModelConfig};
use crate::error::Result;
use crate::losses::{contrastive_node, total_loss_node, LossConfig};
use crate::numerics::{
    grad_check, multi_head_self_attention, AttnMask, GradCheckOptions, Linear, MsaParams, ParamId, ParamStore, Tape,
    Tensor, Var,
};

/// Tolerance for single ops and modules.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for the full-model objective.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
    pub entries_checked: usize,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&mut Tape) -> Result<Var>>;
type Setup = fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<Objective>;

fn randn(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<ParamId> {
    store.add(name, Tensor::randn(shape, 1.0, rng))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry carries a distinct weight.
fn readout(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn elementwise(store: &mut ParamStore, rng: &mut ChaCha8Rng, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<Objective> {
    let x = randn(store, "x", &[3, 4], rng)?;
    let r = weights(&[3, 4], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let xv = t.param(x);
        let o = f(t, xv)?;
        readout(t, o, &r)
    }))
}

fn setup_linear(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let x = randn(s, "x", &[3, 4], rng)?;
    let l = Linear::with_std(s, "l", 4, 5, 1.0, rng)?;
    let r = weights(&[3, 5], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let xv = t.param(x);
        let o = l.forward(t, xv)?;
        readout(t, o, &r)
    }))
}

fn setup_matmul_trans(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = randn(s, "a", &[3, 4], rng)?;
    let b = randn(s, "b", &[5, 4], rng)?;
    let r = weights(&[3, 5], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let (av, bv) = (t.param(a), t.param(b));
        let o = t.matmul(av, bv, true)?;
        readout(t, o, &r)
    }))
}

fn setup_binary(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = randn(s, "a", &[3, 4], rng)?;
    let b = randn(s, "b", &[3, 4], rng)?;
    let g = s.add("g", Tensor::scalar(rng.gen_range(-1.0..1.0)))?;
    let r = weights(&[3, 4], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let (av, bv, gv) = (t.param(a), t.param(b), t.param(g));
        let sum = t.add(av, bv)?;
        let prod = t.mul(sum, bv)?;
        let sc = t.scale(prod, 1.7);
        let mixed = t.lerp(gv, sc, av)?;
        let l1 = readout(t, mixed, &r)?;
        let l2 = readout(t, av, &r)?;
        t.weighted_sum(vec![(l1, 0.5), (l2, -2.0)])
    }))
}

fn setup_layer_norm(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let x = randn(s, "x", &[3, 5], rng)?;
    let g = randn(s, "gamma", &[5], rng)?;
    let b = randn(s, "beta", &[5], rng)?;
    let r = weights(&[3, 5], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
        let o = t.layer_norm(xv, gv, bv)?;
        readout(t, o, &r)
    }))
}

fn msa_setup(s: &mut ParamStore, rng: &mut ChaCha8Rng, mask: AttnMask) -> Result<Objective> {
    // two segments of three tokens
    let x = randn(s, "x", &[6, 4], rng)?;
    let p = MsaParams::new(s, "msa", 4, 2, rng)?;
    for id in p.ids() {
        *s.value_mut(id) = Tensor::randn(s.value(id).shape(), 0.7, rng);
    }
    let r = weights(&[6, 4], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let xv = t.param(x);
        let o = multi_head_self_attention(t, xv, &p, 3, mask)?;
        readout(t, o, &r)
    }))
}

fn setup_msa(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    msa_setup(s, rng, AttnMask::None)
}

fn setup_msa_causal(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    msa_setup(s, rng, AttnMask::Causal)
}

fn setup_row_ops(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let table = randn(s, "table", &[6, 3], rng)?;
    let pos = randn(s, "pos", &[2, 3], rng)?;
    let cls = randn(s, "cls", &[1, 3], rng)?;
    let r = weights(&[3, 3], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let tv = t.param(table);
        let e = t.embed(tv, vec![4, 1, 4, 0])?;
        let pv = t.param(pos);
        let e = t.add_tiled(e, pv)?;
        let cv = t.param(cls);
        let e = t.interleave_cls(cv, e, 2)?;
        let e = t.select_rows(e, vec![0, 2, 4])?;
        let e = t.l2_normalize_rows(e)?;
        readout(t, e, &r)
    }))
}

fn setup_vanilla(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let z = randn(s, "z", &[3, 4], rng)?;
    let p = AdapterParams {
        down: Linear::with_std(s, "down", 4, 2, 1.0, rng)?,
        up: Linear::with_std(s, "up", 2, 4, 1.0, rng)?,
    };
    let r = weights(&[3, 4], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let zv = t.param(z);
        let o = vanilla_adapter(t, zv, &p)?;
        readout(t, o, &r)
    }))
}

fn setup_mmsa(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let x = randn(s, "x", &[4, 4], rng)?;
    let p = MmsAdapterParams {
        down: Linear::with_std(s, "down", 4, 2, 1.0, rng)?,
        msa: MsaParams::new(s, "msa", 2, 1, rng)?,
        up: Linear::with_std(s, "up", 2, 4, 1.0, rng)?,
    };
    let r = weights(&[4, 4], rng);
    Ok(Box::new(move |t: &mut Tape| {
        let xv = t.param(x);
        let o = mmsa(t, xv, &p, 2, AttnMask::None)?;
        readout(t, o, &r)
    }))
}

/// Gives zero-initialized up-projections and default gates random values so every path
/// carries gradient.
fn randomize_mga(s: &mut ParamStore, p: &MgaParams, rng: &mut ChaCha8Rng) {
    for id in p.up.ids() {
        *s.value_mut(id) = Tensor::randn(s.value(id).shape(), 0.5, rng);
    }
    for id in [p.gate1, p.gate2] {
        *s.value_mut(id) = Tensor::scalar(rng.gen_range(0.1..0.9));
    }
}

fn setup_mga(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let zi = randn(s, "zi", &[6, 4], rng)?;
    let zt = randn(s, "zt", &[4, 4], rng)?;
    let shape = MgaShape {
        width: 4,
        bottleneck: 2,
        mms_bottleneck: 2,
        heads: 2,
        mms_heads: 1,
    };
    let p = MgaParams::new(s, "mga", shape, false, false, rng)?;
    randomize_mga(s, &p, rng);
    let (ri, rt) = (weights(&[6, 4], rng), weights(&[4, 4], rng));
    Ok(Box::new(move |t: &mut Tape| {
        let (a, b) = (t.param(zi), t.param(zt));
        let (oi, ot) = mga_forward(t, a, 3, b, 2, &p)?;
        let li = readout(t, oi, &ri)?;
        let lt = readout(t, ot, &rt)?;
        t.add(li, lt)
    }))
}

/// A unit-norm-scale similarity matrix with every hinge at least `gap` from its kink.
fn similarity_off_kinks(n: usize, margin: f64, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Tensor::new(vec![n, n], data).expect("square");
        let clear = (0..n).all(|i| {
            (0..n).filter(|&j| j != i).all(|j| {
                (margin + s.at(i, j) - s.at(i, i)).abs() > gap && (margin + s.at(j, i) - s.at(i, i)).abs() > gap
            })
        });
        if clear {
            return s;
        }
    }
}

fn loss_setup(s: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: LossConfig) -> Result<Objective> {
    let m = similarity_off_kinks(5, cfg.margin, 1e-3, rng);
    let id = s.add("S", m)?;
    Ok(Box::new(move |t: &mut Tape| {
        let v = t.param(id);
        Ok(total_loss_node(t, v, &[], &cfg)?.0)
    }))
}

fn setup_triplet(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let cfg = LossConfig {
        gamma: 0.0,
        alpha_contrastive: 0.0,
        aux_weight: 0.0,
        ..LossConfig::default()
    };
    loss_setup(s, rng, cfg)
}

fn setup_adaptive_triplet(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let cfg = LossConfig {
        alpha_contrastive: 0.0,
        aux_weight: 0.0,
        ..LossConfig::default()
    };
    loss_setup(s, rng, cfg)
}

fn setup_contrastive(s: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let m = similarity_off_kinks(5, 0.2, 0.0, rng);
    let id = s.add("S", m)?;
    Ok(Box::new(move |t: &mut Tape| {
        let v = t.param(id);
        contrastive_node(t, v, 0.07)
    }))
}

pub const OP_CHECKS: &[(&str, Setup)] = &[
    ("linear", setup_linear),
    ("matmul_transposed", setup_matmul_trans),
    ("add_mul_scale_lerp_weighted_sum", setup_binary),
    ("sigmoid", |s, r| elementwise(s, r, |t, x| Ok(t.sigmoid(x)))),
    ("gelu", |s, r| elementwise(s, r, |t, x| Ok(t.gelu(x)))),
    ("softmax_rows", |s, r| elementwise(s, r, |t, x| Ok(t.softmax_rows(x)))),
    ("layer_norm", setup_layer_norm),
    ("multi_head_self_attention", setup_msa),
    ("multi_head_self_attention_causal", setup_msa_causal),
    ("embed_tile_cls_select_normalize", setup_row_ops),
    ("vanilla_adapter", setup_vanilla),
    ("mmsa", setup_mmsa),
    ("mga_forward", setup_mga),
    ("triplet_loss", setup_triplet),
    ("adaptive_triplet_loss", setup_adaptive_triplet),
    ("contrastive_loss", setup_contrastive),
];

fn run(name: &str, tolerance: f64, seeds: &[u64], setup: impl Fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<Objective>) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = setup(&mut store, &mut rng)?;
        let report = grad_check(&mut store, &GradCheckOptions::default(), f)?;
        worst = worst.max(report.max_rel_err);
        entries += report.entries_checked;
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance,
        seeds: seeds.len(),
        entries_checked: entries,
        passed: worst < tolerance,
    })
}

/// Every op-level check over `seeds`.
pub fn op_checks(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    OP_CHECKS.iter().map(|(name, setup)| run(name, OP_TOLERANCE, seeds, setup)).collect()
}

/// Small dual encoder with an MGA at every depth, adapter weights randomized.
pub fn tiny_model_with_mga(seed: u64) -> Result<DualEncoder> {
    let mut model = DualEncoder::new(ModelConfig::tiny(), seed)?;
    let cfg = AdapterConfig {
        policy: AttachPolicy::All,
        bottleneck: 2,
        mms_bottleneck: 2,
        heads: 1,
        mms_heads: 1,
        ..AdapterConfig::default()
    };
    attach_adapters(&mut model, &cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let slots: Vec<MgaParams> = model
        .adapters
        .iter()
        .flatten()
        .filter_map(|s| match s {
            crate::adapters::AdapterSlot::Mga(p) => Some(*p),
            _ => None,
        })
        .collect();
    for p in &slots {
        randomize_mga(&mut model.store, p, &mut rng);
    }
    model.store.set_all_trainable(true);
    Ok(model)
}

/// Total loss (adaptive triplet, contrastive and per-layer terms) of a 2-pair batch through
/// the whole model, checked over every parameter entry.
pub fn end_to_end_check(seeds: &[u64]) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for &seed in seeds {
        let mut model = tiny_model_with_mga(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let ic = model.config.image.clone();
        let images: Vec<Tensor> = (0..2)
            .map(|_| Tensor::randn(&[ic.channels, ic.image_size, ic.image_size], 1.0, &mut rng))
            .collect();
        let vocab = model.config.text.vocab_size;
        let texts: Vec<Vec<usize>> = vec![vec![1, rng.gen_range(4..vocab), 2, 0], vec![1, rng.gen_range(4..vocab), rng.gen_range(4..vocab), 2]];
        let cfg = LossConfig {
            // above 2 every hinge stays active, so the objective is smooth
            margin: 2.5,
            tau: 0.5,
            aux_weight: 0.1,
            ..LossConfig::default()
        };
        let model_ref = model.clone();
        let f = move |t: &mut Tape| -> Result<Var> {
            let out = model_ref.forward(t, Some(&images), Some(&texts), true)?;
            let v = out.image.expect("image").pooled;
            let tx = out.text.expect("text").pooled;
            let s = t.matmul(v, tx, true)?;
            Ok(total_loss_node(t, s, &out.aux_similarities, &cfg)?.0)
        };
        // Narrow layer norms and normalizations make third derivatives large; a smaller step
        // keeps the truncation error of the central difference well under tolerance.
        let opts = GradCheckOptions {
            eps: 1e-6,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&mut model.store, &opts, f)?;
        worst = worst.max(report.max_rel_err);
        entries += report.entries_checked;
    }
    Ok(CheckResult {
        name: "end_to_end_total_loss".into(),
        max_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
        seeds: seeds.len(),
        entries_checked: entries,
        passed: worst < MODEL_TOLERANCE,
    })
}

/// Op checks plus the end-to-end check over seeds `0..n_seeds`.
pub fn gradcheck_suite(n_seeds: u64) -> Result<Vec<CheckResult>> {
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let mut out = op_checks(&seeds)?;
    out.push(end_to_end_check(&seeds)?);
    Ok(out)
}

/// Direct loop transcriptions of the losses and recall, kept free of any shared helpers
/// so they can serve as independent oracles.
pub mod reference {
    use crate::numerics::Tensor;

    pub fn triplet(s: &Tensor, margin: f64, gamma: Option<f64>) -> f64 {
        let n = s.rows();
        let w = |h: f64| match gamma {
            Some(g) if h > 0.0 => (1.0 - (-h).exp()).powf(g),
            _ => 1.0,
        };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let a = (margin + s.at(i, j) - s.at(i, i)).max(0.0);
                let b = (margin + s.at(j, i) - s.at(i, i)).max(0.0);
                total += 0.5 * (w(a) * a + w(b) * b);
            }
        }
        total
    }

    pub fn contrastive(s: &Tensor, tau: f64) -> f64 {
        let n = s.rows();
        let mut v2t = 0.0;
        let mut t2v = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| (s.at(i, j) / tau).exp()).sum();
            let col: f64 = (0..n).map(|j| (s.at(j, i) / tau).exp()).sum();
            v2t -= ((s.at(i, i) / tau).exp() / row).ln();
            t2v -= ((s.at(i, i) / tau).exp() / col).ln();
        }
        (v2t + t2v) / (2.0 * n as f64)
    }

    /// Percentage of queries with a relevant item among the top `k` after a stable
    /// descending sort.
    pub fn recall(s: &Tensor, caption_image: &[usize], k: usize, image_to_text: bool) -> f64 {
        let (queries, items) = if image_to_text { (s.rows(), s.cols()) } else { (s.cols(), s.rows()) };
        let score = |q: usize, it: usize| if image_to_text { s.at(q, it) } else { s.at(it, q) };
        let relevant = |q: usize, it: usize| {
            if image_to_text {
                caption_image[it] == q
            } else {
                caption_image[q] == it
            }
        };
        let mut hits = 0;
        for q in 0..queries {
            let mut order: Vec<usize> = (0..items).collect();
            order.sort_by(|&a, &b| score(q, b).partial_cmp(&score(q, a)).unwrap());
            if order.iter().take(k).any(|&it| relevant(q, it)) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / queries as f64
    }
}

/// Largest deviation between the library losses and [`reference`] over random `n×n`
/// similarity matrices.
pub fn loss_oracle_deviation(n: usize, trials: usize, seed: u64) -> Result<f64> {
    use crate::losses::{adaptive_triplet_loss, contrastive_loss, triplet_loss};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Tensor::new(vec![n, n], data)?;
        let margin = rng.gen_range(0.05..0.5);
        let gamma = rng.gen_range(0.0..5.0);
        let tau = rng.gen_range(0.05..1.0);
        worst = worst
            .max((triplet_loss(&s, margin)? - reference::triplet(&s, margin, None)).abs())
            .max((adaptive_triplet_loss(&s, margin, gamma)? - reference::triplet(&s, margin, Some(gamma))).abs())
            .max((contrastive_loss(&s, tau)? - reference::contrastive(&s, tau)).abs());
    }
    Ok(worst)
}

/// Largest deviation between [`crate::evaluation::RetrievalMetrics`] and the reference
/// recall on random `images × images·per_image` score matrices.
pub fn recall_oracle_deviation(images: usize, per_image: usize, trials: usize, seed: u64) -> Result<f64> {
    use crate::evaluation::{GroundTruth, RetrievalMetrics};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caps = images * per_image;
    let caption_image: Vec<usize> = (0..caps).map(|c| c / per_image).collect();
    let gt = GroundTruth::from_caption_images(caption_image.clone(), images)?;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let data = (0..images * caps).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = Tensor::new(vec![images, caps], data)?;
        let m = RetrievalMetrics::from_scores(&s, &gt)?;
        let expect = [
            reference::recall(&s, &caption_image, 1, true),
            reference::recall(&s, &caption_image, 5, true),
            reference::recall(&s, &caption_image, 10, true),
            reference::recall(&s, &caption_image, 1, false),
            reference::recall(&s, &caption_image, 5, false),
            reference::recall(&s, &caption_image, 10, false),
        ];
        for (a, b) in m.recalls().iter().zip(expect) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((m.mean_recall - expect.iter().sum::<f64>() / 6.0).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_one_seed() {
        for r in op_checks(&[3]).unwrap() {
            assert!(r.passed, "{} {}", r.name, r.max_rel_err);
            assert!(r.entries_checked > 0, "{}", r.name);
        }
    }

    #[test]
    fn oracles_agree_on_a_few_trials() {
        assert!(loss_oracle_deviation(6, 5, 1).unwrap() < 1e-12);
        assert!(recall_oracle_deviation(4, 3, 5, 1).unwrap() < 1e-12);
    }
}
