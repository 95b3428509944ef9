use std::fs;
use std::io::Write;
use std::path::Path;

use harma::adapters::{mga_param_count, vanilla_param_count, AdapterSlot};
use harma::datagen::{write_corpus, PairedSplit, Split};
use harma::encoders::DualEncoder;
use harma::evaluation::{diagnose, embeddings_csv, evaluate, GroundTruth, RetrievalMetrics};
use harma::numerics::Tensor;
use harma::training::{
    apply_freeze, count_trainable, finetune, k_fold_indices, EpochLog, FinetuneReport, ParamCount,
};
use harma::verification::gradcheck_suite;
use harma::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ablation::{self, Event};
use crate::context::{io_error, RunContext};
use crate::error::{CliError, CliResult};

pub const PRETRAINED_FILE: &str = "pretrained.bin";
pub const FINETUNED_FILE: &str = "finetuned.bin";
pub const LAST_GOOD_FILE: &str = "last_good.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Writes `value` as `<name>.json` in the run directory and prints it to stdout.
pub fn emit<T: Serialize>(ctx: &RunContext, name: &str, value: &T) -> CliResult<()> {
    ctx.write_json(&format!("{name}.json"), value)?;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn progress(quiet: bool, msg: impl FnOnce() -> String) {
    if !quiet {
        eprintln!("{}", msg());
    }
}

pub fn gen_data(ctx: &RunContext) -> CliResult<()> {
    let c = &ctx.config;
    let (manifest, vocab) = write_corpus(c.seed, c.split_counts(), c.image_size, &ctx.out_dir)?;
    let per_split: serde_json::Map<String, serde_json::Value> = Split::ALL
        .iter()
        .map(|&s| (s.to_string(), json!(manifest.records_in(s).count())))
        .collect();
    emit(
        ctx,
        "gen_data",
        &json!({
            "dir": ctx.out_dir,
            "images": manifest.records.len(),
            "captions": manifest.caption_count(),
            "vocab_words": vocab.len(),
            "splits": per_split,
        }),
    )
}

pub fn pretrain(ctx: &RunContext, quiet: bool) -> CliResult<()> {
    let corpus = ctx.corpus()?;
    let steps = ctx.config.pretrain_steps;
    let mut log = Vec::with_capacity(steps);
    let (model, final_loss) = ablation::pretrain(&ctx.config, &corpus, &mut |step, loss| {
        log.push(json!({"step": step + 1, "contrastive": loss}).to_string());
        if (step + 1) % 50 == 0 || step + 1 == steps {
            progress(quiet, || format!("pretrain step {}/{steps} loss {loss:.4}", step + 1));
        }
    })?;
    ctx.write_text(TRAIN_LOG, "")?;
    ctx.append_lines(TRAIN_LOG, &log)?;
    let ckpt = ctx.path(PRETRAINED_FILE);
    model.save(&ckpt)?;
    let test = evaluate(&model, corpus.split(Split::FinetuneTest))?;
    emit(
        ctx,
        "pretrain",
        &json!({
            "steps": steps,
            "final_loss": final_loss,
            "checkpoint": ckpt,
            "finetune_test": test,
            "param_count": count_trainable(&model.store),
        }),
    )
}

#[derive(Serialize)]
struct FoldResult {
    fold: usize,
    train_images: usize,
    val_images: usize,
    initial_train_loss: f64,
    epochs: Vec<EpochLog>,
    test: RetrievalMetrics,
    checkpoint: std::path::PathBuf,
}

fn epoch_lines(fold: usize, report: &FinetuneReport) -> Vec<String> {
    report
        .epochs
        .iter()
        .map(|e| json!({"fold": fold, "epoch": e.epoch, "mean_step_loss": e.mean_step_loss, "train_loss": e.train_loss, "val": e.val}).to_string())
        .collect()
}

pub fn finetune_cmd(ctx: &RunContext, quiet: bool) -> CliResult<()> {
    let ckpt = ctx.require_checkpoint("finetune")?;
    let mut base = ctx.load_model(ckpt)?;
    ctx.ensure_adapters(&mut base)?;
    apply_freeze(&mut base, &ctx.config.freeze_policy())?;
    let params = count_trainable(&base.store);
    let corpus = ctx.corpus()?;
    let (train, val, test) = (
        corpus.split(Split::FinetuneTrain),
        corpus.split(Split::FinetuneVal),
        corpus.split(Split::FinetuneTest),
    );
    let k = ctx.config.k_folds;
    let folds: Vec<(PairedSplit, Option<PairedSplit>)> = if k == 1 {
        vec![(train.clone(), (!val.is_empty()).then(|| val.clone()))]
    } else {
        let pool = train.concat(val);
        k_fold_indices(pool.num_images(), k, ctx.config.seed)?
            .into_iter()
            .map(|(tr, held)| (pool.subset(&tr), Some(pool.subset(&held))))
            .collect()
    };
    let cfg = ctx.config.finetune_config();
    ctx.write_text(TRAIN_LOG, "")?;
    let mut results = Vec::new();
    for (f, (tr, va)) in folds.iter().enumerate() {
        let mut model = base.clone();
        let mut steps = Vec::new();
        let outcome = finetune(&mut model, tr, va.as_ref(), &cfg, &mut |s| {
            steps.push(json!({"fold": f, "step": s.step, "total": s.total, "triplet": s.triplet, "contrastive": s.contrastive, "aux": s.aux, "lr": s.lr}).to_string());
        });
        ctx.append_lines(TRAIN_LOG, &steps)?;
        let report = match outcome {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                let p = ctx.path(LAST_GOOD_FILE);
                model.save(&p)?;
                return Err(CliError::Runtime(format!("{e}; last good state saved to {}", p.display())));
            }
            Err(e) => return Err(e.into()),
        };
        ctx.append_lines(TRAIN_LOG, &epoch_lines(f, &report))?;
        if let Some(last) = report.epochs.last() {
            progress(quiet, || {
                format!(
                    "fold {f}: {} epochs, train loss {:.4} -> {:.4}",
                    report.epochs.len(),
                    report.initial_train_loss,
                    last.train_loss
                )
            });
        }
        let name = if k == 1 { FINETUNED_FILE.to_string() } else { format!("finetuned_fold{f}.bin") };
        let p = ctx.path(&name);
        model.save(&p)?;
        results.push(FoldResult {
            fold: f,
            train_images: tr.num_images(),
            val_images: va.as_ref().map_or(0, PairedSplit::num_images),
            initial_train_loss: report.initial_train_loss,
            epochs: report.epochs,
            test: evaluate(&model, test)?,
            checkpoint: p,
        });
    }
    let tests: Vec<RetrievalMetrics> = results.iter().map(|r| r.test).collect();
    emit(
        ctx,
        "finetune",
        &json!({
            "param_count": params,
            "k_folds": k,
            "test": RetrievalMetrics::average(&tests),
            "folds": results,
        }),
    )
}

/// Score matrix fixture for `eval --scores`: `images × captions`, with an optional
/// caption→image map (identity when absent).
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresFixture {
    pub scores: Vec<Vec<f64>>,
    pub caption_image: Option<Vec<usize>>,
}

pub fn metrics_from_fixture(path: &Path) -> CliResult<RetrievalMetrics> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let fx: ScoresFixture = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let rows: Vec<&[f64]> = fx.scores.iter().map(Vec::as_slice).collect();
    let s = Tensor::from_rows(&rows).map_err(|e| CliError::Usage(e.to_string()))?;
    let gt = match fx.caption_image {
        Some(map) => GroundTruth::from_caption_images(map, s.rows()),
        None if s.rows() == s.cols() => Ok(GroundTruth::identity(s.rows())),
        None => Err(Error::Input("non-square scores need caption_image".into())),
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    RetrievalMetrics::from_scores(&s, &gt).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn eval(ctx: &RunContext, split: Split, scores: Option<&Path>) -> CliResult<()> {
    if let Some(p) = scores {
        let m = metrics_from_fixture(p)?;
        return emit(ctx, "eval", &json!({"source": p, "metrics": m}));
    }
    let model = ctx.load_model(ctx.require_checkpoint("eval")?)?;
    let corpus = ctx.corpus()?;
    let m = evaluate(&model, corpus.split(split))?;
    emit(ctx, "eval", &json!({"split": split, "metrics": m}))
}

pub fn diagnose_cmd(ctx: &RunContext, split: Split, random_init: bool) -> CliResult<()> {
    let model = if random_init {
        DualEncoder::new(ctx.config.model_config(), ctx.config.seed)?
    } else {
        ctx.load_model(ctx.require_checkpoint("diagnose")?)?
    };
    let corpus = ctx.corpus()?;
    let (report, emb) = diagnose(&model, corpus.split(split), ctx.config.uniformity_t)?;
    let csv = ctx.path("embeddings.csv");
    fs::write(&csv, embeddings_csv(&emb.images, &emb.texts)).map_err(|e| io_error(&csv, e))?;
    emit(
        ctx,
        "diagnose",
        &json!({"split": split, "random_init": random_init, "report": report, "embeddings": csv}),
    )
}

pub fn gradcheck(ctx: &RunContext, seeds: u64) -> CliResult<()> {
    let checks = gradcheck_suite(seeds)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    emit(
        ctx,
        "gradcheck",
        &json!({"seeds": seeds, "passed": failed.is_empty(), "max_rel_err": worst, "checks": checks}),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("checks over tolerance: {}", failed.join(", "))))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    #[serde(flatten)]
    pub count: ParamCount,
    pub freeze_mode: String,
    pub adapter_params: usize,
    /// Adapter parameter count from the closed-form formulas.
    pub adapter_params_closed_form: usize,
    pub backbone_params: usize,
}

pub fn param_report(ctx: &RunContext, model: &DualEncoder) -> ParamReport {
    let (di, dt) = (model.image.cfg.embed_dim, model.text.cfg.embed_dim);
    let adapter_cfg = model.adapter_config.clone().unwrap_or_else(|| ctx.config.adapter_config());
    let closed: usize = model
        .adapters
        .iter()
        .flatten()
        .map(|s| match s {
            AdapterSlot::Mga(_) => mga_param_count(di, &adapter_cfg),
            AdapterSlot::Vanilla { .. } => vanilla_param_count(di, dt, adapter_cfg.bottleneck),
        })
        .sum();
    let backbone: usize = model
        .store
        .iter()
        .filter(|(_, p)| DualEncoder::is_backbone(&p.name))
        .map(|(_, p)| p.numel())
        .sum();
    ParamReport {
        count: count_trainable(&model.store),
        freeze_mode: ctx.config.freeze_mode.to_string(),
        adapter_params: model.store.total_numel() - backbone,
        adapter_params_closed_form: closed,
        backbone_params: backbone,
    }
}

pub fn count_params(ctx: &RunContext) -> CliResult<()> {
    let mut model = match &ctx.checkpoint {
        Some(_) => ctx.load_model(ctx.require_checkpoint("count-params")?)?,
        None => DualEncoder::new(ctx.config.model_config(), ctx.config.seed)?,
    };
    ctx.ensure_adapters(&mut model)?;
    apply_freeze(&mut model, &ctx.config.freeze_policy())?;
    emit(ctx, "count_params", &param_report(ctx, &model))
}

pub fn ablation_cmd(ctx: &RunContext, quiet: bool) -> CliResult<()> {
    let corpus = ctx.corpus()?;
    let backbone = match &ctx.checkpoint {
        Some(_) => Some(ctx.load_model(ctx.require_checkpoint("ablation")?)?),
        None => None,
    };
    let steps = ctx.config.pretrain_steps;
    let (report, err) = ablation::run_ablation(&ctx.config, &corpus, backbone, &mut |ev| match ev {
        Event::PretrainStep { step, loss } if (step + 1) % 50 == 0 || step + 1 == steps => {
            progress(quiet, || format!("pretrain step {}/{steps} loss {loss:.4}", step + 1));
        }
        Event::Epoch { row, epoch, train_loss, val_mr } => progress(quiet, || {
            format!("{row} epoch {epoch} train loss {train_loss:.4} val mR {:.2}", val_mr.unwrap_or(f64::NAN))
        }),
        Event::RowDone(r) => progress(quiet, || format!("{} test mR {:.2}", r.name, r.test.mean_recall)),
        _ => {}
    });
    ctx.write_text("ablation.md", &report.to_markdown())?;
    emit(ctx, "ablation", &report)?;
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
