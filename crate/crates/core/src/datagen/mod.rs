//! Synthetic paired image–caption corpus: procedurally rendered scenes, five template
//! captions per image, and a fine-tuning domain whose object colors never occur in
//! pretraining.

mod ppm;
mod scene;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ppm::{encode_ppm, load_image, parse_ppm, rgb_to_tensor};
pub use scene::{is_finetune_color, Background, SceneSpec, Shape, Split, PALETTE, PRETRAIN_COLORS};
pub use vocab::{build_vocab, detokenize, tokenize, words, Vocab};

use crate::error::{Error, Result};
use crate::evaluation::GroundTruth;
use crate::numerics::Tensor;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: usize = 4;
pub const CAPTIONS_PER_IMAGE: usize = 5;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub image_id: u64,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("manifest line {}: {e}", i + 1)))?;
            if r.captions.len() != CAPTIONS_PER_IMAGE {
                return Err(Error::Input(format!(
                    "manifest line {}: {} captions, expected {CAPTIONS_PER_IMAGE}",
                    i + 1,
                    r.captions.len()
                )));
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn caption_count(&self) -> usize {
        self.records.iter().map(|r| r.captions.len()).sum()
    }

    /// Ground truth over one split, captions numbered in record order.
    pub fn ground_truth(&self, split: Split) -> Result<GroundTruth> {
        let mut caption_image = Vec::new();
        let mut n = 0;
        for (i, r) in self.records_in(split).enumerate() {
            caption_image.extend(std::iter::repeat(i).take(r.captions.len()));
            n = i + 1;
        }
        GroundTruth::from_caption_images(caption_image, n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub pretrain: usize,
    pub finetune_train: usize,
    pub finetune_val: usize,
    pub finetune_test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::FinetuneTrain => self.finetune_train,
            Split::FinetuneVal => self.finetune_val,
            Split::FinetuneTest => self.finetune_test,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

/// One rendered scene with its manifest record.
#[derive(Clone, Debug)]
pub struct GeneratedImage {
    pub record: ManifestRecord,
    pub scene: SceneSpec,
    /// Interleaved RGB, `image_size²·3` bytes.
    pub rgb: Vec<u8>,
}

/// Deterministic scene stream: splits in fixed order, ids sequential.
pub fn generate_scenes(seed: u64, counts: SplitCounts, image_size: usize) -> Vec<GeneratedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(counts.total());
    for split in Split::ALL {
        for _ in 0..counts.get(split) {
            let id = out.len() as u64;
            let scene = SceneSpec::sample(&mut rng, split);
            let rgb = scene.render(image_size);
            let record = ManifestRecord {
                image_path: format!("{IMAGE_DIR}/{id:06}.ppm"),
                image_id: id,
                captions: scene.captions().to_vec(),
                split,
            };
            out.push(GeneratedImage { record, scene, rgb });
        }
    }
    out
}

/// Renders the corpus under `out_dir` as PPM files and returns the manifest. Nothing is
/// written when every count is zero.
pub fn generate_corpus(
    seed: u64,
    counts: SplitCounts,
    image_size: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    let items = generate_scenes(seed, counts, image_size);
    if items.is_empty() {
        return Ok(Manifest::default());
    }
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let path = out_dir.join(&item.record.image_path);
        fs::write(&path, encode_ppm(image_size, image_size, &item.rgb))
            .map_err(|e| Error::io(&path, e))?;
        records.push(item.record);
    }
    Ok(Manifest { records })
}

/// Writes images, `manifest.jsonl` and `vocab.txt`.
pub fn write_corpus(
    seed: u64,
    counts: SplitCounts,
    image_size: usize,
    out_dir: &Path,
) -> Result<(Manifest, Vocab)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = generate_corpus(seed, counts, image_size, out_dir)?;
    let vocab = build_vocab(&manifest);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    vocab.write(&out_dir.join(VOCAB_FILE))?;
    Ok((manifest, vocab))
}

/// Images and tokenized captions of one split, held in memory.
#[derive(Clone, Debug, Default)]
pub struct PairedSplit {
    pub images: Vec<Tensor>,
    pub image_ids: Vec<u64>,
    /// Tokenized captions, padded to `max_len`.
    pub captions: Vec<Vec<usize>>,
    pub caption_image: Vec<usize>,
    pub image_captions: Vec<Vec<usize>>,
}

impl PairedSplit {
    pub fn push(&mut self, id: u64, image: Tensor, captions: &[String], vocab: &Vocab, max_len: usize) {
        let img = self.images.len();
        self.images.push(image);
        self.image_ids.push(id);
        let mut mine = Vec::with_capacity(captions.len());
        for c in captions {
            mine.push(self.captions.len());
            self.captions.push(tokenize(c, vocab, max_len));
            self.caption_image.push(img);
        }
        self.image_captions.push(mine);
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_captions(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        GroundTruth::from_caption_images(self.caption_image.clone(), self.images.len())
    }

    /// The listed images with all of their captions.
    pub fn subset(&self, images: &[usize]) -> PairedSplit {
        let mut out = PairedSplit::default();
        for &i in images {
            let idx = out.images.len();
            out.images.push(self.images[i].clone());
            out.image_ids.push(self.image_ids[i]);
            let mut mine = Vec::new();
            for &c in &self.image_captions[i] {
                mine.push(out.captions.len());
                out.captions.push(self.captions[c].clone());
                out.caption_image.push(idx);
            }
            out.image_captions.push(mine);
        }
        out
    }

    pub fn concat(&self, other: &PairedSplit) -> PairedSplit {
        let mut out = self.clone();
        let all: Vec<usize> = (0..other.num_images()).collect();
        let tail = other.subset(&all);
        let (img_off, cap_off) = (out.images.len(), out.captions.len());
        out.images.extend(tail.images);
        out.image_ids.extend(tail.image_ids);
        out.captions.extend(tail.captions);
        out.caption_image.extend(tail.caption_image.iter().map(|i| i + img_off));
        out.image_captions.extend(
            tail.image_captions
                .iter()
                .map(|cs| cs.iter().map(|c| c + cap_off).collect()),
        );
        out
    }
}

/// Every split of a corpus plus its vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub splits: BTreeMap<Split, PairedSplit>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &PairedSplit {
        &self.splits[&s]
    }

    /// Reads `manifest.jsonl`, `vocab.txt` and the referenced images under `dir`.
    pub fn load(dir: &Path, max_len: usize) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let vocab = Vocab::read(&dir.join(VOCAB_FILE))?;
        let mut splits: BTreeMap<Split, PairedSplit> =
            Split::ALL.iter().map(|&s| (s, PairedSplit::default())).collect();
        for r in &manifest.records {
            let img = load_image(&dir.join(&r.image_path))?;
            splits
                .get_mut(&r.split)
                .expect("all splits present")
                .push(r.image_id, img, &r.captions, &vocab, max_len);
        }
        Ok(Self { vocab, splits })
    }

    /// Same content as [`write_corpus`] followed by [`Corpus::load`], without touching disk.
    pub fn in_memory(seed: u64, counts: SplitCounts, image_size: usize, max_len: usize) -> Self {
        let items = generate_scenes(seed, counts, image_size);
        let manifest = Manifest {
            records: items.iter().map(|i| i.record.clone()).collect(),
        };
        let vocab = build_vocab(&manifest);
        let mut splits: BTreeMap<Split, PairedSplit> =
            Split::ALL.iter().map(|&s| (s, PairedSplit::default())).collect();
        for item in &items {
            let img = rgb_to_tensor(image_size, image_size, &item.rgb);
            splits.get_mut(&item.record.split).expect("split").push(
                item.record.image_id,
                img,
                &item.record.captions,
                &vocab,
                max_len,
            );
        }
        Self { vocab, splits }
    }
}
