use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    FinetuneVal,
    FinetuneTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Pretrain,
        Split::FinetuneTrain,
        Split::FinetuneVal,
        Split::FinetuneTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::FinetuneTrain => "finetune_train",
            Split::FinetuneVal => "finetune_val",
            Split::FinetuneTest => "finetune_test",
        }
    }

    pub fn is_finetune(self) -> bool {
        self != Split::Pretrain
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Background {
    Solid,
    Grid,
    Stripes,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Solid, Background::Grid, Background::Stripes];

    fn word(self) -> &'static str {
        match self {
            Background::Solid => "plain",
            Background::Grid => "grid",
            Background::Stripes => "striped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Bar];

    fn noun(self, plural: bool) -> &'static str {
        match (self, plural) {
            (Shape::Square, false) => "square",
            (Shape::Square, true) => "squares",
            (Shape::Circle, false) => "circle",
            (Shape::Circle, true) => "circles",
            (Shape::Bar, false) => "bar",
            (Shape::Bar, true) => "bars",
        }
    }
}

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 220, 50]),
    ("cyan", [50, 220, 220]),
    ("magenta", [220, 60, 220]),
    ("white", [240, 240, 240]),
    ("orange", [240, 140, 30]),
];

const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
const COUNTS: [&str; 4] = ["one", "two", "three", "four"];
const BG_BASE: [u8; 3] = [30, 30, 30];
const BG_LINE: [u8; 3] = [75, 75, 75];

/// Fields of one synthetic scene. All objects share shape, color and size and sit in one
/// quadrant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Background,
    pub shape: Shape,
    /// Index into [`PALETTE`].
    pub color: usize,
    /// 1 to 4.
    pub count: usize,
    /// 0 top left, 1 top right, 2 bottom left, 3 bottom right.
    pub quadrant: usize,
    pub large: bool,
    /// Occupied cells of the quadrant's 2×2 layout, one per object.
    pub slots: Vec<usize>,
    /// Per-object pixel offsets in `-1..=1`.
    pub jitter: Vec<(i32, i32)>,
    pub split: Split,
}

/// Palette entries `0..PRETRAIN_COLORS` appear only in pretraining; the rest only in the
/// fine-tuning splits.
pub const PRETRAIN_COLORS: usize = 5;

pub fn is_finetune_color(color: usize) -> bool {
    color >= PRETRAIN_COLORS
}

impl SceneSpec {
    /// Draws a scene whose color belongs to `split`'s domain.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, split: Split) -> Self {
        let color = if split.is_finetune() {
            rng.gen_range(PRETRAIN_COLORS..PALETTE.len())
        } else {
            rng.gen_range(0..PRETRAIN_COLORS)
        };
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        let background = Background::ALL[rng.gen_range(0..Background::ALL.len())];
        let count = rng.gen_range(1..=4);
        let quadrant = rng.gen_range(0..4);
        let large = rng.gen_bool(0.5);
        let mut cells = [0usize, 1, 2, 3];
        cells.shuffle(rng);
        let mut slots = cells[..count].to_vec();
        slots.sort_unstable();
        let jitter = (0..count)
            .map(|_| (rng.gen_range(-1..=1), rng.gen_range(-1..=1)))
            .collect();
        Self {
            background,
            shape,
            color,
            count,
            quadrant,
            large,
            slots,
            jitter,
            split,
        }
    }

    /// Five distinct paraphrases of the scene.
    pub fn captions(&self) -> [String; 5] {
        let plural = self.count > 1;
        let count = COUNTS[self.count - 1];
        let color = PALETTE[self.color].0;
        let shape = self.shape.noun(plural);
        let quad = QUADRANTS[self.quadrant];
        let bg = self.background.word();
        let size = if self.large { "large" } else { "small" };
        let verb = if plural { "are" } else { "is" };
        [
            format!("{count} {size} {color} {shape} in the {quad} on a {bg} background"),
            format!("a {bg} scene with {count} {color} {shape} at the {quad}"),
            format!("there {verb} {count} {size} {color} {shape} in the {quad} corner"),
            format!("{count} {size} {shape} colored {color} over a {bg} pattern"),
            format!("the {quad} holds {count} {color} {shape}"),
        ]
    }

    /// Renders to interleaved RGB bytes, row-major, `size × size`.
    pub fn render(&self, size: usize) -> Vec<u8> {
        let mut px = vec![0u8; size * size * 3];
        let period = (size / 8).max(2);
        for y in 0..size {
            for x in 0..size {
                let line = match self.background {
                    Background::Solid => false,
                    Background::Grid => x % period == 0 || y % period == 0,
                    Background::Stripes => (x + y) % (2 * period) < period / 2 + 1,
                };
                let c = if line { BG_LINE } else { BG_BASE };
                px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        let half = size / 2;
        let cell = (size / 4) as f64;
        let extent = if self.large { 0.875 * cell } else { 0.5 * cell };
        let (qx, qy) = ((self.quadrant % 2) * half, (self.quadrant / 2) * half);
        let rgb = PALETTE[self.color].1;
        for (slot, &(jx, jy)) in self.slots.iter().zip(&self.jitter) {
            let cx = qx as f64 + (slot % 2) as f64 * cell + cell / 2.0 + jx as f64;
            let cy = qy as f64 + (slot / 2) as f64 * cell + cell / 2.0 + jy as f64;
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let inside = match self.shape {
                        Shape::Square => dx.abs() <= extent / 2.0 && dy.abs() <= extent / 2.0,
                        Shape::Circle => dx * dx + dy * dy <= (extent / 2.0) * (extent / 2.0),
                        Shape::Bar => dx.abs() <= extent / 2.0 + 0.5 && dy.abs() <= extent / 4.0,
                    };
                    if inside {
                        px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        px
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn domains_split_the_palette() {
        let n = (0..PALETTE.len()).filter(|&c| is_finetune_color(c)).count();
        assert_eq!(n, 3);
    }

    #[test]
    fn sampled_scenes_respect_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for split in Split::ALL {
            for _ in 0..50 {
                let s = SceneSpec::sample(&mut rng, split);
                assert_eq!(is_finetune_color(s.color), split.is_finetune());
                assert_eq!(s.slots.len(), s.count);
            }
        }
    }

    #[test]
    fn captions_are_distinct_and_cover_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SceneSpec::sample(&mut rng, Split::Pretrain);
        let caps = s.captions();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(caps[i], caps[j]);
            }
        }
        let all = caps.join(" ");
        assert!(all.contains(PALETTE[s.color].0));
        assert!(all.contains(QUADRANTS[s.quadrant]));
        assert!(all.contains(s.background.word()));
    }

    #[test]
    fn render_paints_object_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SceneSpec::sample(&mut rng, Split::Pretrain);
        let px = s.render(32);
        assert_eq!(px.len(), 32 * 32 * 3);
        let rgb = PALETTE[s.color].1;
        assert!(px.chunks(3).any(|c| c == rgb));
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("test".parse::<Split>().is_err());
    }
}
