use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    multi_head_self_attention, AttnMask, Linear, MsaParams, ParamId, ParamStore, Tape, Tensor, Var,
};

pub const GATE_INIT: f64 = 0.5;

/// Multimodal sub-adapter: down-projection, attention, up-projection at width `r'`.
/// One instance serves both modality streams.
#[derive(Clone, Copy, Debug)]
pub struct MmsAdapterParams {
    pub down: Linear,
    pub msa: MsaParams,
    pub up: Linear,
}

/// Parameters of one multimodal gated adapter.
#[derive(Clone, Copy, Debug)]
pub struct MgaParams {
    /// `W1, b1`: `D → r`.
    pub down: Linear,
    /// `W2, b2`: `r → D`, zero at initialization.
    pub up: Linear,
    /// Attention used at the `f2` position, and at `f4` unless `msa_f4` is set.
    pub msa: MsaParams,
    /// Separate `f4` attention when the per-position sharing variant is selected.
    pub msa_f4: Option<MsaParams>,
    pub mms: MmsAdapterParams,
    pub gate1: ParamId,
    pub gate2: ParamId,
    pub sigmoid_gates: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct MgaShape {
    pub width: usize,
    pub bottleneck: usize,
    pub mms_bottleneck: usize,
    pub heads: usize,
    pub mms_heads: usize,
}

impl MgaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        shape: MgaShape,
        separate_f4_attention: bool,
        sigmoid_gates: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let MgaShape {
            width,
            bottleneck: r,
            mms_bottleneck: r2,
            heads,
            mms_heads,
        } = shape;
        if r == 0 || r >= width || r2 == 0 {
            return Err(Error::Config(format!(
                "adapter bottleneck {r} must satisfy 0 < r < {width}, sub-adapter width {r2} > 0"
            )));
        }
        let down = Linear::new(store, &format!("{prefix}.down"), width, r, rng)?;
        let up = Linear::zeros(store, &format!("{prefix}.up"), r, width)?;
        let msa = MsaParams::new(store, &format!("{prefix}.msa"), r, heads, rng)?;
        let msa_f4 = if separate_f4_attention {
            Some(MsaParams::new(store, &format!("{prefix}.msa_f4"), r, heads, rng)?)
        } else {
            None
        };
        let mms = MmsAdapterParams {
            down: Linear::new(store, &format!("{prefix}.mms.down"), r, r2, rng)?,
            msa: MsaParams::new(store, &format!("{prefix}.mms.msa"), r2, mms_heads, rng)?,
            up: Linear::new(store, &format!("{prefix}.mms.up"), r2, r, rng)?,
        };
        let gate1 = store.add(format!("{prefix}.gate1"), Tensor::scalar(GATE_INIT))?;
        let gate2 = store.add(format!("{prefix}.gate2"), Tensor::scalar(GATE_INIT))?;
        Ok(Self {
            down,
            up,
            msa,
            msa_f4,
            mms,
            gate1,
            gate2,
            sigmoid_gates,
        })
    }

    /// Every distinct parameter, each listed once.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.down.ids());
        ids.extend(self.up.ids());
        ids.extend(self.msa.ids());
        if let Some(m) = &self.msa_f4 {
            ids.extend(m.ids());
        }
        ids.extend(self.mms.down.ids());
        ids.extend(self.mms.msa.ids());
        ids.extend(self.mms.up.ids());
        ids.push(self.gate1);
        ids.push(self.gate2);
        ids
    }

    fn gate(&self, tape: &mut Tape, id: ParamId) -> Var {
        let g = tape.param(id);
        if self.sigmoid_gates {
            tape.sigmoid(g)
        } else {
            g
        }
    }
}

/// `W_up·MSA(σ(W_down·x + b_down)) + b_up`, no residual.
pub fn mmsa(
    tape: &mut Tape,
    x: Var,
    p: &MmsAdapterParams,
    seq: usize,
    mask: AttnMask,
) -> Result<Var> {
    let h = p.down.forward(tape, x)?;
    let h = tape.gelu(h);
    let h = multi_head_self_attention(tape, h, &p.msa, seq, mask)?;
    p.up.forward(tape, h)
}

/// One modality stream through the gated adapter:
///
/// ```text
/// f1 = σ(W1·Z + b1)
/// f2 = MSA(f1)
/// f3 = λ1·MMSA(f2) + (1 − λ1)·f2
/// f4 = λ2·MSA(f3) + (1 − λ2)·f1
/// out = W2·f4 + b2 + Z
/// ```
pub fn mga_stream(
    tape: &mut Tape,
    z: Var,
    p: &MgaParams,
    seq: usize,
    mask: AttnMask,
) -> Result<Var> {
    let width = p.down.d_in(tape.store());
    if tape.value(z).cols() != width {
        return Err(Error::Config(format!(
            "adapter width {width} does not match feature width {}",
            tape.value(z).cols()
        )));
    }
    let f1 = p.down.forward(tape, z)?;
    let f1 = tape.gelu(f1);
    let f2 = multi_head_self_attention(tape, f1, &p.msa, seq, mask)?;
    let m = mmsa(tape, f2, &p.mms, seq, mask)?;
    let l1 = p.gate(tape, p.gate1);
    let f3 = tape.lerp(l1, m, f2)?;
    let msa_f4 = p.msa_f4.as_ref().unwrap_or(&p.msa);
    let a = multi_head_self_attention(tape, f3, msa_f4, seq, mask)?;
    let l2 = p.gate(tape, p.gate2);
    let f4 = tape.lerp(l2, a, f1)?;
    let out = p.up.forward(tape, f4)?;
    tape.add(out, z)
}

/// Both streams through the same adapter. The image stream attends bidirectionally,
/// the text stream causally.
pub fn mga_forward(
    tape: &mut Tape,
    z_image: Var,
    image_seq: usize,
    z_text: Var,
    text_seq: usize,
    p: &MgaParams,
) -> Result<(Var, Var)> {
    let i = mga_stream(tape, z_image, p, image_seq, AttnMask::None)?;
    let t = mga_stream(tape, z_text, p, text_seq, AttnMask::Causal)?;
    Ok((i, t))
}
