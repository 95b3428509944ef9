use rand::Rng;

use crate::error::Result;
use crate::numerics::{Linear, ParamId, ParamStore, Tape, Var};

/// Bottleneck adapter `W_up·σ(W_down·z)`, row-wise.
#[derive(Clone, Copy, Debug)]
pub struct AdapterParams {
    pub down: Linear,
    pub up: Linear,
}

impl AdapterParams {
    /// Random down-projection, zero up-projection.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            down: Linear::new(store, &format!("{prefix}.down"), width, bottleneck, rng)?,
            up: Linear::zeros(store, &format!("{prefix}.up"), bottleneck, width)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.down, self.up].iter().flat_map(|l| l.ids()).collect()
    }
}

/// The adapter transform alone; the caller adds the residual.
pub fn vanilla_adapter(tape: &mut Tape, z: Var, p: &AdapterParams) -> Result<Var> {
    let h = p.down.forward(tape, z)?;
    let h = tape.gelu(h);
    p.up.forward(tape, h)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tensor;

    fn setup() -> (ParamStore, AdapterParams) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AdapterParams::new(&mut s, "a", 2, 1, &mut rng).unwrap();
        (s, p)
    }

    fn run(s: &ParamStore, p: &AdapterParams, z: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(s);
        let z = tape.constant(Tensor::from_rows(&[z]).unwrap());
        let y = vanilla_adapter(&mut tape, z, p).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn zero_up_projection_gives_zero() {
        let (s, p) = setup();
        assert_eq!(run(&s, &p, &[0.3, -1.2]), [0.0, 0.0]);
    }

    #[test]
    fn zero_down_projection_gives_zero() {
        let (mut s, p) = setup();
        s.value_mut(p.down.w).fill(0.0);
        *s.value_mut(p.up.w) = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(run(&s, &p, &[0.3, -1.2]), [0.0, 0.0]);
    }

    #[test]
    fn hand_example() {
        let (mut s, p) = setup();
        *s.value_mut(p.down.w) = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        *s.value_mut(p.up.w) = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let y = run(&s, &p, &[1.0, 1.0]);
        // 2·Φ(2)
        assert!((y[0] - 1.954500).abs() < 1e-6);
        assert_eq!(y[1], 0.0);
    }
}
