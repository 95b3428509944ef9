//! Toy dual encoders: a patch-based image transformer and a causal text transformer,
//! both projecting into a shared unit-norm embedding space.

mod checkpoint;
mod config;
mod pretrain;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_checkpoint, CheckpointEntry};
pub use config::{ImageEncoderConfig, ModelConfig, TextEncoderConfig};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainReport};

use crate::adapters::{AdapterConfig, AdapterSlot};
use crate::datagen::EOS_ID;
use crate::error::{Error, Result};
use crate::numerics::{
    multi_head_self_attention, AttnMask, Linear, MsaParams, ParamId, ParamStore, Tape, Tensor, Var,
};

const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.g"), Tensor::full(&[width], 1.0))?,
            beta: store.add(format!("{prefix}.b"), Tensor::zeros(&[width]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: MsaParams,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = width * mlp_ratio;
        Ok(Self {
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), width)?,
            attn: MsaParams::new(store, &format!("{prefix}.attn"), width, heads, rng)?,
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), width)?,
            fc1: Linear::new(store, &format!("{prefix}.fc1"), width, hidden, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, width, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, seq: usize, mask: AttnMask) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = multi_head_self_attention(tape, h, &self.attn, seq, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct ImageTower {
    pub cfg: ImageEncoderConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNormParams,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub cfg: TextEncoderConfig,
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNormParams,
    pub proj: Linear,
}

/// Output of encoding one input.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Token matrix after each layer, adapters included.
    pub per_layer_tokens: Vec<Tensor>,
    /// L2-normalized embedding.
    pub pooled: Tensor,
}

/// Tape handles produced by one stream of [`DualEncoder::forward`].
#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub layers: Vec<Var>,
    /// `batch × proj_dim`, unit-norm rows.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub image: Option<StreamOutput>,
    pub text: Option<StreamOutput>,
    /// Similarity matrices built from pooled MGA outputs at each attached layer.
    pub aux_similarities: Vec<Var>,
}

/// Both towers, their adapter slots, and the parameter store they index into.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: ImageTower,
    pub text: TextTower,
    /// One slot per depth, shared by both towers.
    pub adapters: Vec<Option<AdapterSlot>>,
    pub adapter_config: Option<AdapterConfig>,
}

/// Splits a `C×H×W` image into row-major flattened patches, `N² × C·p·p`.
pub fn extract_patches(image: &Tensor, cfg: &ImageEncoderConfig) -> Result<Tensor> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            expected
        )));
    }
    let p = cfg.patch_size();
    let n = cfg.patch_grid;
    let hw = cfg.image_size;
    let data = image.data();
    let mut out = Tensor::zeros(&[n * n, cfg.patch_dim()]);
    for py in 0..n {
        for px in 0..n {
            let row = out.row_mut(py * n + px);
            let mut k = 0;
            for c in 0..cfg.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        row[k] = data[c * hw * hw + (py * p + dy) * hw + px * p + dx];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Position of the first end-of-sequence token, or the last position.
pub fn eos_position(ids: &[usize]) -> usize {
    ids.iter()
        .position(|&t| t == EOS_ID)
        .unwrap_or(ids.len().saturating_sub(1))
}

impl DualEncoder {
    /// Randomly initialized towers with no adapters attached.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ic = &config.image;
        let image = ImageTower {
            cfg: ic.clone(),
            patch: Linear::new(&mut store, "image.patch", ic.patch_dim(), ic.embed_dim, &mut rng)?,
            cls: store.add(
                "image.cls",
                Tensor::randn(&[1, ic.embed_dim], EMBED_INIT_STD, &mut rng),
            )?,
            pos: store.add(
                "image.pos",
                Tensor::randn(&[ic.num_patches(), ic.embed_dim], EMBED_INIT_STD, &mut rng),
            )?,
            blocks: (0..ic.layers)
                .map(|l| {
                    Block::new(
                        &mut store,
                        &format!("image.blocks.{l}"),
                        ic.embed_dim,
                        ic.heads,
                        ic.mlp_ratio,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?,
            ln_post: LayerNormParams::new(&mut store, "image.ln_post", ic.embed_dim)?,
            proj: Linear::new(&mut store, "image.proj", ic.embed_dim, ic.proj_dim, &mut rng)?,
        };
        let tc = &config.text;
        let text = TextTower {
            cfg: tc.clone(),
            tok: store.add(
                "text.tok",
                Tensor::randn(&[tc.vocab_size, tc.embed_dim], EMBED_INIT_STD, &mut rng),
            )?,
            pos: store.add(
                "text.pos",
                Tensor::randn(&[tc.max_len, tc.embed_dim], EMBED_INIT_STD, &mut rng),
            )?,
            blocks: (0..tc.layers)
                .map(|l| {
                    Block::new(
                        &mut store,
                        &format!("text.blocks.{l}"),
                        tc.embed_dim,
                        tc.heads,
                        tc.mlp_ratio,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?,
            ln_post: LayerNormParams::new(&mut store, "text.ln_post", tc.embed_dim)?,
            proj: Linear::new(&mut store, "text.proj", tc.embed_dim, tc.proj_dim, &mut rng)?,
        };
        let depth = ic.layers.max(tc.layers);
        Ok(Self {
            config,
            store,
            image,
            text,
            adapters: vec![None; depth],
            adapter_config: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.adapters.len()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters.iter().any(Option::is_some)
    }

    /// Removes all adapters and their parameters.
    pub fn detach_adapters(&mut self) -> Result<()> {
        let mut fresh = ParamStore::new();
        for (_, p) in self.store.iter() {
            if p.name.starts_with("image.") || p.name.starts_with("text.") {
                let id = fresh.add(p.name.clone(), p.value.clone())?;
                fresh.get_mut(id).trainable = p.trainable;
            }
        }
        // backbone parameters were registered first, so their ids are unchanged
        debug_assert!(self
            .store
            .iter()
            .take(fresh.len())
            .all(|(id, p)| fresh.get(id).name == p.name));
        self.store = fresh;
        self.adapters.iter_mut().for_each(|a| *a = None);
        self.adapter_config = None;
        Ok(())
    }

    fn image_tokens(&self, tape: &mut Tape, images: &[Tensor]) -> Result<Var> {
        let cfg = &self.image.cfg;
        let mut patches = Tensor::zeros(&[images.len() * cfg.num_patches(), cfg.patch_dim()]);
        for (i, img) in images.iter().enumerate() {
            let p = extract_patches(img, cfg)?;
            let start = i * p.len();
            patches.data_mut()[start..start + p.len()].copy_from_slice(p.data());
        }
        let x = tape.constant(patches);
        let x = self.image.patch.forward(tape, x)?;
        let pos = tape.param(self.image.pos);
        let x = tape.add_tiled(x, pos)?;
        let cls = tape.param(self.image.cls);
        tape.interleave_cls(cls, x, cfg.num_patches())
    }

    /// Returns padded token embeddings, the common sequence length and EOS row indices.
    fn text_tokens(&self, tape: &mut Tape, texts: &[Vec<usize>]) -> Result<(Var, usize, Vec<usize>)> {
        let cfg = &self.text.cfg;
        let seq = texts.iter().map(Vec::len).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if seq > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let mut ids = Vec::with_capacity(texts.len() * seq);
        let mut eos = Vec::with_capacity(texts.len());
        for (i, t) in texts.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            if let Some(&bad) = t.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} out of vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            ids.extend_from_slice(t);
            ids.extend(std::iter::repeat(0).take(seq - t.len()));
            eos.push(i * seq + eos_position(t));
        }
        let tok = tape.param(self.text.tok);
        let x = tape.embed(tok, ids)?;
        let pos = tape.param(self.text.pos);
        let pos = tape.select_rows(pos, (0..seq).collect())?;
        Ok((tape.add_tiled(x, pos)?, seq, eos))
    }

    fn pool_image(&self, tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
        let n = self.image.cfg.num_tokens();
        let cls = tape.select_rows(x, (0..batch).map(|b| b * n).collect())?;
        let h = self.image.ln_post.forward(tape, cls)?;
        let h = self.image.proj.forward(tape, h)?;
        tape.l2_normalize_rows(h)
    }

    fn pool_text(&self, tape: &mut Tape, x: Var, eos: &[usize]) -> Result<Var> {
        let h = tape.select_rows(x, eos.to_vec())?;
        let h = self.text.ln_post.forward(tape, h)?;
        let h = self.text.proj.forward(tape, h)?;
        tape.l2_normalize_rows(h)
    }

    /// Runs both towers layer by layer, applying the adapter at each depth to whichever
    /// streams are present.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Option<&[Tensor]>,
        texts: Option<&[Vec<usize>]>,
        collect_aux: bool,
    ) -> Result<ForwardOutput> {
        let image_seq = self.image.cfg.num_tokens();
        let mut img = match images {
            Some(imgs) => Some(self.image_tokens(tape, imgs)?),
            None => None,
        };
        let (mut txt, text_seq, eos) = match texts {
            Some(t) => {
                let (x, seq, eos) = self.text_tokens(tape, t)?;
                (Some(x), seq, eos)
            }
            None => (None, 0, Vec::new()),
        };
        let mut img_layers = Vec::new();
        let mut txt_layers = Vec::new();
        let mut aux = Vec::new();
        for l in 0..self.depth() {
            if let (Some(x), Some(block)) = (img, self.image.blocks.get(l)) {
                img = Some(block.forward(tape, x, image_seq, AttnMask::None)?);
            }
            if let (Some(x), Some(block)) = (txt, self.text.blocks.get(l)) {
                txt = Some(block.forward(tape, x, text_seq, AttnMask::Causal)?);
            }
            if let Some(slot) = &self.adapters[l] {
                if let Some(x) = img {
                    img = Some(slot.apply_image(tape, x, image_seq)?);
                }
                if let Some(x) = txt {
                    txt = Some(slot.apply_text(tape, x, text_seq)?);
                }
                if collect_aux && slot.is_mga() {
                    if let (Some(xi), Some(xt), Some(imgs)) = (img, txt, images) {
                        let vi = self.pool_image(tape, xi, imgs.len())?;
                        let vt = self.pool_text(tape, xt, &eos)?;
                        aux.push(tape.matmul(vi, vt, true)?);
                    }
                }
            }
            if l < self.image.blocks.len() {
                img_layers.extend(img);
            }
            if l < self.text.blocks.len() {
                txt_layers.extend(txt);
            }
        }
        let image = match (img, images) {
            (Some(x), Some(imgs)) => Some(StreamOutput {
                layers: img_layers,
                pooled: self.pool_image(tape, x, imgs.len())?,
            }),
            _ => None,
        };
        let text = match txt {
            Some(x) => Some(StreamOutput {
                layers: txt_layers,
                pooled: self.pool_text(tape, x, &eos)?,
            }),
            None => None,
        };
        Ok(ForwardOutput {
            image,
            text,
            aux_similarities: aux,
        })
    }

    /// Class token plus positional patch embeddings, `(N²+1) × D`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let x = self.image_tokens(&mut tape, std::slice::from_ref(image))?;
        Ok(tape.value(x).clone())
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<EncoderOutput> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward(&mut tape, Some(std::slice::from_ref(image)), None, false)?;
        let s = out.image.expect("image stream present");
        Ok(EncoderOutput {
            per_layer_tokens: s.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            pooled: pooled_vector(tape.value(s.pooled)),
        })
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<EncoderOutput> {
        let mut tape = Tape::new(&self.store);
        let texts = [ids.to_vec()];
        let out = self.forward(&mut tape, None, Some(&texts), false)?;
        let s = out.text.expect("text stream present");
        let seq = ids.len();
        Ok(EncoderOutput {
            per_layer_tokens: s
                .layers
                .iter()
                .map(|&v| tape.value(v).clone().reshape(vec![seq, self.text.cfg.embed_dim]))
                .collect::<Result<_>>()?,
            pooled: pooled_vector(tape.value(s.pooled)),
        })
    }

    /// Pooled embeddings of many images, `N × proj_dim`, computed in chunks.
    pub fn embed_images(&self, images: &[Tensor], chunk: usize) -> Result<Tensor> {
        let d = self.image.cfg.proj_dim;
        let mut out = Vec::with_capacity(images.len() * d);
        for c in images.chunks(chunk.max(1)) {
            let mut tape = Tape::new(&self.store);
            let f = self.forward(&mut tape, Some(c), None, false)?;
            out.extend_from_slice(tape.value(f.image.expect("image").pooled).data());
        }
        Tensor::new(vec![images.len(), d], out)
    }

    pub fn embed_texts(&self, texts: &[Vec<usize>], chunk: usize) -> Result<Tensor> {
        let d = self.text.cfg.proj_dim;
        let mut out = Vec::with_capacity(texts.len() * d);
        for c in texts.chunks(chunk.max(1)) {
            let mut tape = Tape::new(&self.store);
            let f = self.forward(&mut tape, None, Some(c), false)?;
            out.extend_from_slice(tape.value(f.text.expect("text").pooled).data());
        }
        Tensor::new(vec![texts.len(), d], out)
    }

    /// Names of all backbone (non-adapter) parameters start with one of these.
    pub const BACKBONE_PREFIXES: [&'static str; 2] = ["image.", "text."];

    pub fn is_backbone(name: &str) -> bool {
        Self::BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Checksum over backbone values only.
    pub fn backbone_checksum(&self) -> u64 {
        self.store.checksum(&["mga.", "adapter."])
    }
}

fn pooled_vector(m: &Tensor) -> Tensor {
    Tensor::vector(m.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DualEncoder {
        DualEncoder::new(ModelConfig::tiny(), 0).unwrap()
    }

    fn ramp_image(cfg: &ImageEncoderConfig, offset: f64) -> Tensor {
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|i| ((i as f64) * 0.37 + offset).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_shape() {
        let cfg = ModelConfig {
            image: ImageEncoderConfig {
                image_size: 4,
                channels: 3,
                patch_grid: 2,
                embed_dim: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                proj_dim: 4,
            },
            text: TextEncoderConfig {
                proj_dim: 4,
                embed_dim: 8,
                ..ModelConfig::tiny().text
            },
        };
        let m = DualEncoder::new(cfg.clone(), 0).unwrap();
        let t = m.patchify(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(t.shape(), &[5, 8]);
    }

    #[test]
    fn zero_image_patch_rows_equal_bias() {
        let mut m = tiny();
        let pos = m.image.pos;
        m.store.value_mut(pos).fill(0.0);
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        *m.store.value_mut(m.image.patch.b) = bias.clone();
        let t = m.patchify(&Tensor::zeros(&[1, 4, 4])).unwrap();
        for r in 1..5 {
            assert_eq!(t.row(r), bias.data());
        }
    }

    #[test]
    fn one_pixel_patches() {
        let cfg = ImageEncoderConfig {
            image_size: 2,
            channels: 1,
            patch_grid: 2,
            embed_dim: 1,
            layers: 0,
            heads: 1,
            mlp_ratio: 1,
            proj_dim: 1,
        };
        let text = TextEncoderConfig {
            embed_dim: 1,
            heads: 1,
            proj_dim: 1,
            ..ModelConfig::tiny().text
        };
        let mut m = DualEncoder::new(ModelConfig { image: cfg, text }, 0).unwrap();
        *m.store.value_mut(m.image.patch.w) = Tensor::from_rows(&[&[1.0]]).unwrap();
        m.store.value_mut(m.image.pos).fill(0.0);
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = m.patchify(&img).unwrap();
        assert_eq!(&t.data()[1..], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.at(0, 0), m.store.value(m.image.cls).item());
    }

    #[test]
    fn image_size_mismatch_is_config_error() {
        let m = tiny();
        assert!(matches!(
            m.encode_image(&Tensor::zeros(&[1, 3, 3])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pooled_outputs_are_unit_norm() {
        let m = tiny();
        let img = ramp_image(&m.config.image, 0.0);
        let out = m.encode_image(&img).unwrap();
        let n: f64 = out.pooled.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(out.per_layer_tokens.len(), 2);
        let t = m.encode_text(&[1]).unwrap();
        let n: f64 = t.pooled.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_is_deterministic_and_padding_invariant() {
        let m = tiny();
        let a = m.encode_text(&[1, 5, 6, 2]).unwrap().pooled;
        let b = m.encode_text(&[1, 5, 6, 2]).unwrap().pooled;
        assert_eq!(a, b);
        let short = m.encode_text(&[1, 5, 2]).unwrap().pooled;
        let padded = m.encode_text(&[1, 5, 2, 0]).unwrap().pooled;
        assert!(short.max_abs_diff(&padded) < 1e-12);
    }

    #[test]
    fn out_of_vocab_is_input_error() {
        let m = tiny();
        assert!(matches!(m.encode_text(&[1, 99]), Err(Error::Input(_))));
        assert!(matches!(m.encode_text(&[1, 2, 3, 4, 5]), Err(Error::Input(_))));
    }

    #[test]
    fn batched_embedding_matches_single() {
        let m = tiny();
        let imgs: Vec<_> = (0..3).map(|i| ramp_image(&m.config.image, i as f64)).collect();
        let batch = m.embed_images(&imgs, 2).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let single = m.encode_image(img).unwrap().pooled;
            let row = Tensor::vector(batch.row(i).to_vec());
            assert!(single.max_abs_diff(&row) < 1e-12);
        }
        let texts = vec![vec![1, 4, 2], vec![1, 5, 6, 2]];
        let batch = m.embed_texts(&texts, 8).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let single = m.encode_text(t).unwrap().pooled;
            assert!(single.max_abs_diff(&Tensor::vector(batch.row(i).to_vec())) < 1e-12);
        }
    }
}
