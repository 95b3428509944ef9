use harma::adapters::{attach_adapters, AdapterConfig, AdapterSlot};
use harma::datagen::{Corpus, Split, SplitCounts};
use harma::encoders::{load_checkpoint, DualEncoder, ImageEncoderConfig, ModelConfig, TextEncoderConfig};
use harma::numerics::{Tape, Tensor};
use harma::training::{apply_freeze, count_trainable, finetune, FinetuneConfig, FreezeMode, FreezePolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        image: ImageEncoderConfig {
            image_size: 8,
            channels: 3,
            patch_grid: 2,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            proj_dim: 8,
        },
        text: TextEncoderConfig {
            vocab_size: 128,
            max_len: 12,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            proj_dim: 8,
        },
    }
}

fn adapter_cfg() -> AdapterConfig {
    AdapterConfig {
        bottleneck: 4,
        mms_bottleneck: 2,
        heads: 2,
        mms_heads: 1,
        ..AdapterConfig::default()
    }
}

fn corpus() -> Corpus {
    let counts = SplitCounts {
        pretrain: 0,
        finetune_train: 12,
        finetune_val: 4,
        finetune_test: 4,
    };
    Corpus::in_memory(3, counts, 8, 12)
}

fn quick_ft(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-2,
        seed,
        ..FinetuneConfig::default()
    }
}

fn adapted_model() -> DualEncoder {
    let mut m = DualEncoder::new(small_config(), 5).unwrap();
    attach_adapters(&mut m, &adapter_cfg(), 5).unwrap();
    apply_freeze(&mut m, &FreezePolicy::new(FreezeMode::AdaptersOnly)).unwrap();
    m
}

#[test]
fn fresh_adapters_change_no_output_at_default_scale() {
    let cfg = ModelConfig::default();
    let base = DualEncoder::new(cfg.clone(), 9).unwrap();
    let mut adapted = base.clone();
    attach_adapters(&mut adapted, &AdapterConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
    let text = vec![1, 17, 42, 99, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    let (a, b) = (base.encode_image(&img).unwrap(), adapted.encode_image(&img).unwrap());
    assert_eq!(a.pooled.max_abs_diff(&b.pooled), 0.0);
    for (x, y) in a.per_layer_tokens.iter().zip(&b.per_layer_tokens) {
        assert_eq!(x.max_abs_diff(y), 0.0);
    }
    let (a, b) = (base.encode_text(&text).unwrap(), adapted.encode_text(&text).unwrap());
    assert_eq!(a.pooled.max_abs_diff(&b.pooled), 0.0);
}

#[test]
fn detaching_restores_the_backbone_forward() {
    let mut m = adapted_model();
    let c = corpus();
    finetune(&mut m, c.split(Split::FinetuneTrain), None, &quick_ft(0), &mut |_| {}).unwrap();
    let plain = DualEncoder::from_entries(
        small_config(),
        &adapter_cfg(),
        &load_entries_without_adapters(&m),
    )
    .unwrap();
    let img = &c.split(Split::FinetuneTest).images[0];
    let adapted_out = m.encode_image(img).unwrap().pooled;
    m.detach_adapters().unwrap();
    let detached = m.encode_image(img).unwrap().pooled;
    assert_eq!(detached, plain.encode_image(img).unwrap().pooled);
    assert_ne!(detached, adapted_out);
}

fn load_entries_without_adapters(m: &DualEncoder) -> Vec<harma::encoders::CheckpointEntry> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    m.save(&p).unwrap();
    load_checkpoint(&p)
        .unwrap()
        .into_iter()
        .filter(|e| DualEncoder::is_backbone(&e.name))
        .collect()
}

#[test]
fn adapter_weights_are_shared_across_streams() {
    let m = adapted_model();
    let AdapterSlot::Mga(p) = m.adapters.iter().flatten().next().unwrap().clone() else {
        panic!("expected an MGA slot");
    };
    // give the up-projection weight so gradients reach the inner attention
    let mut m = m;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    *m.store.value_mut(p.up.w) = Tensor::randn(m.store.value(p.up.w).shape(), 0.3, &mut rng);
    let c = corpus();
    let split = c.split(Split::FinetuneTrain);
    let imgs = &split.images[..2];
    let texts = vec![split.captions[0].clone(), split.captions[5].clone()];
    let r = Tensor::randn(&[2, 8], 1.0, &mut rng);
    let grad_of = |use_img: bool, use_txt: bool| {
        let mut tape = Tape::new(&m.store);
        let out = m
            .forward(&mut tape, use_img.then_some(imgs), use_txt.then(|| texts.as_slice()), false)
            .unwrap();
        let mut terms = Vec::new();
        for s in [out.image, out.text].into_iter().flatten() {
            let rv = tape.constant(r.clone());
            let prod = tape.mul(s.pooled, rv).unwrap();
            terms.push((tape.sum(prod), 1.0));
        }
        let loss = tape.weighted_sum(terms).unwrap();
        let g = tape.backward(loss).unwrap();
        g.params().iter().find(|(id, _)| *id == p.msa.q.w).map(|(_, t)| t.clone()).unwrap()
    };
    let gi = grad_of(true, false);
    let gt = grad_of(false, true);
    let both = grad_of(true, true);
    assert!(gi.data().iter().any(|&v| v != 0.0));
    assert!(gt.data().iter().any(|&v| v != 0.0));
    let mut sum = gi.clone();
    sum.add_assign(&gt);
    assert!(sum.max_abs_diff(&both) < 1e-12);
}

#[test]
fn adapters_only_training_keeps_backbone_bit_identical() {
    let mut m = adapted_model();
    let before = m.backbone_checksum();
    let snapshot: Vec<Tensor> = m
        .store
        .iter()
        .filter(|(_, p)| DualEncoder::is_backbone(&p.name))
        .map(|(_, p)| p.value.clone())
        .collect();
    let adapters_before = m.store.checksum(&DualEncoder::BACKBONE_PREFIXES);
    let c = corpus();
    finetune(&mut m, c.split(Split::FinetuneTrain), Some(c.split(Split::FinetuneVal)), &quick_ft(0), &mut |_| {})
        .unwrap();
    assert_eq!(m.backbone_checksum(), before);
    let after: Vec<&Tensor> = m
        .store
        .iter()
        .filter(|(_, p)| DualEncoder::is_backbone(&p.name))
        .map(|(_, p)| &p.value)
        .collect();
    for (a, b) in snapshot.iter().zip(after) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(m.store.checksum(&DualEncoder::BACKBONE_PREFIXES), adapters_before);
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let mut m = adapted_model();
        finetune(&mut m, c.split(Split::FinetuneTrain), None, &quick_ft(4), &mut |_| {}).unwrap();
        let p = dir.path().join(format!("{run}.bin"));
        m.save(&p).unwrap();
        bytes.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_counts_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = adapted_model();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    m.save(&a).unwrap();
    let loaded = DualEncoder::load(&a, small_config(), &adapter_cfg()).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let entries = load_checkpoint(&a).unwrap();
    let trainable: usize = entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum();
    let total: usize = entries.iter().map(|e| e.value.len()).sum();
    let count = count_trainable(&loaded.store);
    assert_eq!((count.trainable, count.total), (trainable, total));
}

#[test]
fn pooled_embeddings_are_unit_norm_and_deterministic() {
    let m = adapted_model();
    let c = corpus();
    let split = c.split(Split::FinetuneVal);
    let a = m.embed_texts(&split.captions, 8).unwrap();
    let b = m.embed_texts(&split.captions, 3).unwrap();
    assert_eq!(a, b);
    for i in 0..a.rows() {
        let n = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn divergence_leaves_the_last_finite_parameters() {
    let mut model = DualEncoder::new(small_config(), 4).unwrap();
    attach_adapters(&mut model, &adapter_cfg(), 4).unwrap();
    apply_freeze(&mut model, &FreezePolicy::new(FreezeMode::AdaptersOnly)).unwrap();
    let c = corpus();
    let cfg = FinetuneConfig {
        lr: f64::MAX,
        ..quick_ft(0)
    };
    let err = finetune(&mut model, c.split(Split::FinetuneTrain), None, &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err, harma::Error::Diverged { .. }), "{err}");
    for (_, p) in model.store.iter() {
        assert!(p.value.is_finite(), "{}", p.name);
    }
}
