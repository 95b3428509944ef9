//! Retrieval metrics with one-to-many ground truth and embedding-geometry diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::PairedSplit;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::losses::similarity_matrix;
use crate::numerics::Tensor;

/// Caption ↔ image correspondence. Every caption has exactly one image; every image has at
/// least one caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    image_to_texts: Vec<Vec<usize>>,
    text_to_image: Vec<usize>,
}

impl GroundTruth {
    pub fn from_caption_images(caption_image: Vec<usize>, num_images: usize) -> Result<Self> {
        let mut image_to_texts = vec![Vec::new(); num_images];
        for (c, &i) in caption_image.iter().enumerate() {
            let slot = image_to_texts.get_mut(i).ok_or_else(|| {
                Error::Input(format!("caption {c} points at image {i} of {num_images}"))
            })?;
            slot.push(c);
        }
        if let Some(i) = image_to_texts.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("image {i} has no captions")));
        }
        Ok(Self {
            image_to_texts,
            text_to_image: caption_image,
        })
    }

    /// Caption `i` belongs to image `i`.
    pub fn identity(n: usize) -> Self {
        Self::from_caption_images((0..n).collect(), n).expect("identity pairing")
    }

    /// `per_image` consecutive captions per image.
    pub fn uniform(num_images: usize, per_image: usize) -> Self {
        let caps = (0..num_images * per_image).map(|c| c / per_image).collect();
        Self::from_caption_images(caps, num_images).expect("uniform pairing")
    }

    pub fn num_images(&self) -> usize {
        self.image_to_texts.len()
    }

    pub fn num_captions(&self) -> usize {
        self.text_to_image.len()
    }

    pub fn captions_of(&self, image: usize) -> &[usize] {
        &self.image_to_texts[image]
    }

    pub fn image_of(&self, caption: usize) -> usize {
        self.text_to_image[caption]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Position of `target` in `scores` sorted by descending score, ties to the lower index.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize, target_score: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > target_score || (s == target_score && j < target))
        .count()
}

fn check_shape(s: &Tensor, gt: &GroundTruth) -> Result<()> {
    if s.shape().len() != 2 || s.rows() != gt.num_images() || s.cols() != gt.num_captions() {
        return Err(Error::dim(
            "recall_at_k",
            s.shape(),
            &[gt.num_images(), gt.num_captions()],
        ));
    }
    Ok(())
}

/// Percentage of queries whose ground truth lands in the top `k`. `s` is
/// `images × captions`; `k` is clamped to the candidate count.
pub fn recall_at_k(s: &Tensor, gt: &GroundTruth, k: usize, dir: Direction) -> Result<f64> {
    check_shape(s, gt)?;
    let (n_img, n_txt) = (s.rows(), s.cols());
    let hits = match dir {
        Direction::ImageToText => {
            let k = k.min(n_txt);
            (0..n_img)
                .filter(|&i| {
                    let row = s.row(i);
                    gt.captions_of(i)
                        .iter()
                        .any(|&c| rank_of(row.iter().copied(), c, row[c]) < k)
                })
                .count()
        }
        Direction::TextToImage => {
            let k = k.min(n_img);
            (0..n_txt)
                .filter(|&c| {
                    let i = gt.image_of(c);
                    let col = (0..n_img).map(|r| s.at(r, c));
                    rank_of(col, i, s.at(i, c)) < k
                })
                .count()
        }
    };
    let queries = match dir {
        Direction::ImageToText => n_img,
        Direction::TextToImage => n_txt,
    };
    if queries == 0 {
        return Err(Error::Input("recall over an empty query set".into()));
    }
    Ok(100.0 * hits as f64 / queries as f64)
}

pub fn mean_recall(r1_i2t: f64, r5_i2t: f64, r10_i2t: f64, r1_t2i: f64, r5_t2i: f64, r10_t2i: f64) -> f64 {
    (r1_i2t + r5_i2t + r10_i2t + r1_t2i + r5_t2i + r10_t2i) / 6.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    #[serde(rename = "mR")]
    pub mean_recall: f64,
}

impl RetrievalMetrics {
    pub fn from_scores(s: &Tensor, gt: &GroundTruth) -> Result<Self> {
        use Direction::*;
        let r = |k, d| recall_at_k(s, gt, k, d);
        let mut m = Self {
            r1_i2t: r(1, ImageToText)?,
            r5_i2t: r(5, ImageToText)?,
            r10_i2t: r(10, ImageToText)?,
            r1_t2i: r(1, TextToImage)?,
            r5_t2i: r(5, TextToImage)?,
            r10_t2i: r(10, TextToImage)?,
            mean_recall: 0.0,
        };
        m.mean_recall = m.recompute_mean();
        Ok(m)
    }

    pub fn recalls(&self) -> [f64; 6] {
        [self.r1_i2t, self.r5_i2t, self.r10_i2t, self.r1_t2i, self.r5_t2i, self.r10_t2i]
    }

    pub fn recompute_mean(&self) -> f64 {
        let [a, b, c, d, e, f] = self.recalls();
        mean_recall(a, b, c, d, e, f)
    }

    /// Element-wise mean of several reports.
    pub fn average(all: &[RetrievalMetrics]) -> Self {
        let n = all.len().max(1) as f64;
        let mut sum = [0.0; 6];
        for m in all {
            for (s, r) in sum.iter_mut().zip(m.recalls()) {
                *s += r;
            }
        }
        let [a, b, c, d, e, f] = sum.map(|s| s / n);
        Self {
            r1_i2t: a,
            r5_i2t: b,
            r10_i2t: c,
            r1_t2i: d,
            r5_t2i: e,
            r10_t2i: f,
            mean_recall: mean_recall(a, b, c, d, e, f),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log mean_{i<j} exp(−t‖e_i − e_j‖²)` over rows of `e`.
pub fn uniformity(e: &Tensor, t: f64) -> Result<f64> {
    let n = e.rows();
    if n < 2 {
        return Err(Error::Input(format!("uniformity needs at least 2 points, got {n}")));
    }
    let mut logits = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            logits.push(-t * sq_dist(e.row(i), e.row(j)));
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    Ok(max + (sum / logits.len() as f64).ln())
}

/// Mean `‖v − t‖²` over every (caption, its image) pair.
pub fn alignment(v: &Tensor, t: &Tensor, gt: &GroundTruth) -> Result<f64> {
    if v.rows() != gt.num_images() || t.rows() != gt.num_captions() || v.cols() != t.cols() {
        return Err(Error::dim("alignment", v.shape(), t.shape()));
    }
    if t.rows() == 0 {
        return Err(Error::Input("alignment over zero pairs".into()));
    }
    let total: f64 = (0..t.rows())
        .map(|c| sq_dist(v.row(gt.image_of(c)), t.row(c)))
        .sum();
    Ok(total / t.rows() as f64)
}

fn centroid(e: &Tensor) -> Vec<f64> {
    let mut c = vec![0.0; e.cols()];
    for i in 0..e.rows() {
        for (a, x) in c.iter_mut().zip(e.row(i)) {
            *a += x;
        }
    }
    c.iter_mut().for_each(|a| *a /= e.rows() as f64);
    c
}

/// Euclidean distance between the two centroids.
pub fn modality_gap(v: &Tensor, t: &Tensor) -> f64 {
    sq_dist(&centroid(v), &centroid(t)).sqrt()
}

/// Mean Euclidean distance from each row to its nearest other row.
pub fn intra_modal_nn(e: &Tensor) -> Result<f64> {
    let n = e.rows();
    if n < 2 {
        return Err(Error::Input("nearest neighbour needs at least 2 points".into()));
    }
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(e.row(i), e.row(j)))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Connected components of the graph linking rows closer than `radius`.
pub fn cluster_count(e: &Tensor, radius: f64) -> usize {
    let n = e.rows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let r2 = radius * radius;
    for i in 0..n {
        for j in i + 1..n {
            if sq_dist(e.row(i), e.row(j)) < r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

pub const CLUSTER_RADIUS: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub alignment: f64,
    pub uniformity_image: f64,
    pub uniformity_text: f64,
    pub modality_gap: f64,
    pub intra_modal_nn_image: f64,
    pub intra_modal_nn_text: f64,
    /// Components of the `CLUSTER_RADIUS` proximity graph per modality.
    pub clusters_image: usize,
    pub clusters_text: usize,
}

pub fn diagnostics(v: &Tensor, t: &Tensor, gt: &GroundTruth, uniformity_t: f64) -> Result<DiagnosticsReport> {
    Ok(DiagnosticsReport {
        alignment: alignment(v, t, gt)?,
        uniformity_image: uniformity(v, uniformity_t)?,
        uniformity_text: uniformity(t, uniformity_t)?,
        modality_gap: modality_gap(v, t),
        intra_modal_nn_image: intra_modal_nn(v)?,
        intra_modal_nn_text: intra_modal_nn(t)?,
        clusters_image: cluster_count(v, CLUSTER_RADIUS),
        clusters_text: cluster_count(t, CLUSTER_RADIUS),
    })
}

/// Embeddings of one split: images, captions and their scores.
#[derive(Clone, Debug)]
pub struct SplitEmbeddings {
    pub images: Tensor,
    pub texts: Tensor,
    pub scores: Tensor,
    pub ground_truth: GroundTruth,
}

pub const EMBED_CHUNK: usize = 64;

pub fn embed_split(model: &DualEncoder, split: &PairedSplit) -> Result<SplitEmbeddings> {
    if split.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let images = model.embed_images(&split.images, EMBED_CHUNK)?;
    let texts = model.embed_texts(&split.captions, EMBED_CHUNK)?;
    let scores = similarity_matrix(&images, &texts)?;
    Ok(SplitEmbeddings {
        images,
        texts,
        scores,
        ground_truth: split.ground_truth()?,
    })
}

pub fn evaluate(model: &DualEncoder, split: &PairedSplit) -> Result<RetrievalMetrics> {
    let e = embed_split(model, split)?;
    RetrievalMetrics::from_scores(&e.scores, &e.ground_truth)
}

/// Metrics plus diagnostics for a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: RetrievalMetrics,
    pub diagnostics: DiagnosticsReport,
}

pub fn diagnose(model: &DualEncoder, split: &PairedSplit, uniformity_t: f64) -> Result<(EvalReport, SplitEmbeddings)> {
    let e = embed_split(model, split)?;
    let report = EvalReport {
        metrics: RetrievalMetrics::from_scores(&e.scores, &e.ground_truth)?,
        diagnostics: diagnostics(&e.images, &e.texts, &e.ground_truth, uniformity_t)?,
    };
    Ok((report, e))
}

/// CSV with columns `id,modality,e0..e{d-1}`. Image ids are split-local image indices,
/// caption ids split-local caption indices.
pub fn embeddings_csv(images: &Tensor, texts: &Tensor) -> String {
    let d = images.cols();
    let mut s = String::from("id,modality");
    for k in 0..d {
        let _ = write!(s, ",e{k}");
    }
    s.push('\n');
    for (name, m) in [("image", images), ("text", texts)] {
        for i in 0..m.rows() {
            let _ = write!(s, "{i},{name}");
            for x in m.row(i) {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    s
}
