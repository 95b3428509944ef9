//! Browser demo: three small interactive views over the core library.
//!
//! 1. How the adaptive triplet weight reshapes the loss as the focusing exponent changes.
//! 2. Alignment, uniformity and retrieval on a toy set of 2-D paired embeddings.
//! 3. How the two gates of a multimodal gated adapter steer its output.

use harma::adapters::{mga_forward, MgaParams, MgaShape};
use harma::evaluation::{alignment, modality_gap, uniformity, GroundTruth, RetrievalMetrics};
use harma::losses::{adaptive_triplet_loss, adaptive_weight, contrastive_loss, similarity_matrix, triplet_loss};
use harma::numerics::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Largest hinge value shown on the weight curve.
pub const HINGE_RANGE: f64 = 2.0;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `points` samples of the adaptive weight over hinge values `0..=HINGE_RANGE`.
#[wasm_bindgen]
pub fn weight_curve(gamma: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n)
        .map(|i| adaptive_weight(HINGE_RANGE * i as f64 / (n - 1) as f64, gamma))
        .collect()
}

/// Plain triplet, adaptive triplet and contrastive loss on a random `n × n` similarity
/// matrix whose diagonal sits `separation` above the off-diagonal mean.
#[wasm_bindgen]
pub fn loss_comparison(n: usize, separation: f64, margin: f64, gamma: f64, tau: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.max(2);
    let mut s = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-0.3..0.3)).collect()).map_err(err)?;
    for i in 0..n {
        let v = s.at(i, i) + separation;
        s.set(i, i, v);
    }
    Ok(vec![
        triplet_loss(&s, margin).map_err(err)?,
        adaptive_triplet_loss(&s, margin, gamma).map_err(err)?,
        contrastive_loss(&s, tau).map_err(err)?,
    ])
}

/// Paired points on the unit circle plus their retrieval and geometry statistics.
#[wasm_bindgen]
pub struct CircleReport {
    points: Vec<f64>,
    pub alignment: f64,
    pub uniformity: f64,
    pub modality_gap: f64,
    pub mean_recall: f64,
}

#[wasm_bindgen]
impl CircleReport {
    /// Interleaved `[image_x, image_y, text_x, text_y]` per pair.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }
}

/// `n` images spread over a `spread` fraction of the circle, each caption rotated from its
/// image by Gaussian noise of width `noise` radians plus a fixed `offset`.
#[wasm_bindgen]
pub fn circle_embeddings(n: usize, spread: f64, noise: f64, offset: f64, seed: u64) -> Result<CircleReport, JsError> {
    let n = n.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Vec::with_capacity(2 * n);
    let mut txt = Vec::with_capacity(2 * n);
    let mut points = Vec::with_capacity(4 * n);
    for i in 0..n {
        let a = std::f64::consts::TAU * spread.clamp(0.0, 1.0) * i as f64 / n as f64;
        let z: f64 = Tensor::randn(&[1], 1.0, &mut rng).data()[0];
        let b = a + offset + noise * z;
        img.extend([a.cos(), a.sin()]);
        txt.extend([b.cos(), b.sin()]);
        points.extend([a.cos(), a.sin(), b.cos(), b.sin()]);
    }
    let v = Tensor::new(vec![n, 2], img).map_err(err)?;
    let t = Tensor::new(vec![n, 2], txt).map_err(err)?;
    let gt = GroundTruth::identity(n);
    let s = similarity_matrix(&v, &t).map_err(err)?;
    Ok(CircleReport {
        points,
        alignment: alignment(&v, &t, &gt).map_err(err)?,
        uniformity: uniformity(&v, 2.0).map_err(err)?,
        modality_gap: modality_gap(&v, &t),
        mean_recall: RetrievalMetrics::from_scores(&s, &gt).map_err(err)?.mean_recall,
    })
}

const WIDTH: usize = 8;
const IMAGE_TOKENS: usize = 5;
const TEXT_TOKENS: usize = 4;

/// A fixed random gated adapter with non-zero up-projection, on fixed random tokens.
#[wasm_bindgen]
pub struct GateProbe {
    store: ParamStore,
    params: MgaParams,
    image: Tensor,
    text: Tensor,
}

#[wasm_bindgen]
impl GateProbe {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<GateProbe, JsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shape = MgaShape {
            width: WIDTH,
            bottleneck: 4,
            mms_bottleneck: 2,
            heads: 2,
            mms_heads: 1,
        };
        let params = MgaParams::new(&mut store, "mga", shape, false, false, &mut rng).map_err(err)?;
        for id in params.up.ids() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
        }
        Ok(GateProbe {
            store,
            params,
            image: Tensor::randn(&[IMAGE_TOKENS, WIDTH], 1.0, &mut rng),
            text: Tensor::randn(&[TEXT_TOKENS, WIDTH], 1.0, &mut rng),
        })
    }

    /// Mean per-token distance between adapter output and input, `[image, text]`, at the
    /// given gate values.
    pub fn response(&mut self, gate1: f64, gate2: f64) -> Result<Vec<f64>, JsError> {
        *self.store.value_mut(self.params.gate1) = Tensor::scalar(gate1);
        *self.store.value_mut(self.params.gate2) = Tensor::scalar(gate2);
        let mut tape = Tape::new(&self.store);
        let zi = tape.constant(self.image.clone());
        let zt = tape.constant(self.text.clone());
        let (oi, ot) = mga_forward(&mut tape, zi, IMAGE_TOKENS, zt, TEXT_TOKENS, &self.params).map_err(err)?;
        Ok(vec![
            mean_row_distance(tape.value(oi), &self.image),
            mean_row_distance(tape.value(ot), &self.text),
        ])
    }

    /// Image-stream response over a `steps × steps` grid of gate values in `[0, 1]`,
    /// row-major with the first gate along rows.
    pub fn grid(&mut self, steps: usize) -> Result<Vec<f64>, JsError> {
        let n = steps.max(2);
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (g1, g2) = (i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64);
                out.push(self.response(g1, g2)?[0]);
            }
        }
        Ok(out)
    }
}

fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (rows, cols) = (a.rows(), a.cols());
    let total: f64 = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| (a.at(i, j) - b.at(i, j)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / rows as f64
}
