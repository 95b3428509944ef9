//! Three-row comparison: full fine-tuning, gated adapters with a contrastive objective, and
//! gated adapters with the adaptive triplet plus contrastive objective.

use std::fmt::Write as _;

use harma::adapters::{attach_adapters, AdapterKind};
use harma::config::RunConfig;
use harma::datagen::{Corpus, Split};
use harma::encoders::{pretrain_backbone, DualEncoder};
use harma::evaluation::{diagnose, DiagnosticsReport, RetrievalMetrics};
use harma::losses::LossConfig;
use harma::training::{apply_freeze, count_trainable, finetune, FreezeMode, FreezePolicy, ParamCount};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const ROW_NAMES: [&str; 3] = ["full_ft", "mga_contrastive", "harma"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub freeze_mode: String,
    pub objective: String,
    pub lr: f64,
    pub trainable: ParamCount,
    pub final_train_loss: f64,
    pub test: RetrievalMetrics,
    pub diagnostics: DiagnosticsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub train_pairs: usize,
    pub test_images: usize,
    /// Mean contrastive loss over the last tenth of pretraining steps; absent when a
    /// pretrained checkpoint was supplied.
    pub pretrain_final_loss: Option<f64>,
    pub random_init_diagnostics: Option<DiagnosticsReport>,
    /// The pretrained backbone evaluated on the test split without any fine-tuning.
    pub frozen_baseline: Option<RetrievalMetrics>,
    pub frozen_diagnostics: Option<DiagnosticsReport>,
    pub rows: Vec<AblationRow>,
    /// Set when a row failed; `rows` then holds only the completed ones.
    pub error: Option<String>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Test mR gain of the HarMA row over the frozen backbone.
    pub fn harma_gain(&self) -> Option<f64> {
        Some(self.row("harma")?.test.mean_recall - self.frozen_baseline?.mean_recall)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| method | trainable % | i2t R@1 | i2t R@5 | i2t R@10 | t2i R@1 | t2i R@5 | t2i R@10 | mR |"
        );
        let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|");
        for r in &self.rows {
            let m = &r.test;
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                r.name,
                r.trainable.percent,
                m.r1_i2t,
                m.r5_i2t,
                m.r10_i2t,
                m.r1_t2i,
                m.r5_t2i,
                m.r10_t2i,
                m.mean_recall
            );
        }
        if let Some(b) = &self.frozen_baseline {
            let _ = writeln!(s, "\nFrozen pretrained backbone, no fine-tuning: mR {:.2}", b.mean_recall);
        }
        if let Some(e) = &self.error {
            let _ = writeln!(s, "\nIncomplete: {e}");
        }
        s
    }
}

/// Progress events, for logging.
pub enum Event<'a> {
    PretrainStep { step: usize, loss: f64 },
    Epoch { row: &'a str, epoch: usize, train_loss: f64, val_mr: Option<f64> },
    RowDone(&'a AblationRow),
}

struct RowSpec {
    name: &'static str,
    mode: FreezeMode,
    adapters: bool,
    loss: LossConfig,
    objective: &'static str,
    lr: f64,
}

fn row_specs(cfg: &RunConfig) -> Vec<RowSpec> {
    let full = cfg.loss_config();
    let contrastive = LossConfig {
        alpha_triplet: 0.0,
        ..full.clone()
    };
    vec![
        RowSpec {
            name: ROW_NAMES[0],
            mode: FreezeMode::FullFt,
            adapters: false,
            loss: LossConfig {
                aux_weight: 0.0,
                ..contrastive.clone()
            },
            objective: "contrastive",
            lr: cfg.full_ft_lr,
        },
        RowSpec {
            name: ROW_NAMES[1],
            mode: FreezeMode::AdaptersOnly,
            adapters: true,
            loss: contrastive,
            objective: "contrastive + per-layer matching",
            lr: cfg.lr,
        },
        RowSpec {
            name: ROW_NAMES[2],
            mode: FreezeMode::AdaptersOnly,
            adapters: true,
            loss: full,
            objective: "adaptive triplet + contrastive + per-layer matching",
            lr: cfg.lr,
        },
    ]
}

/// Pretrains a backbone from the config, reporting the mean loss of the last tenth of steps.
pub fn pretrain(
    cfg: &RunConfig,
    corpus: &Corpus,
    on_step: &mut dyn FnMut(usize, f64),
) -> CliResult<(DualEncoder, Option<f64>)> {
    let mut model = DualEncoder::new(cfg.model_config(), cfg.seed)?;
    let report = pretrain_backbone(&mut model, corpus.split(Split::Pretrain), &cfg.pretrain_config(), on_step)?;
    let n = report.losses.len();
    let tail = (n / 10).max(1).min(n);
    let final_loss = (n > 0).then(|| report.losses[n - tail..].iter().sum::<f64>() / tail as f64);
    Ok((model, final_loss))
}

fn run_row(
    spec: &RowSpec,
    cfg: &RunConfig,
    backbone: &DualEncoder,
    corpus: &Corpus,
    on_event: &mut dyn FnMut(Event<'_>),
) -> CliResult<AblationRow> {
    let mut model = backbone.clone();
    if spec.adapters {
        if cfg.adapter_kind == AdapterKind::None {
            return Err(CliError::Usage("adapter rows need adapter_kind other than none".into()));
        }
        attach_adapters(&mut model, &cfg.adapter_config(), cfg.seed)?;
    }
    apply_freeze(&mut model, &FreezePolicy::new(spec.mode))?;
    let trainable = count_trainable(&model.store);
    let mut ft = cfg.finetune_config();
    ft.lr = spec.lr;
    ft.loss = spec.loss.clone();
    let report = finetune(
        &mut model,
        corpus.split(Split::FinetuneTrain),
        Some(corpus.split(Split::FinetuneVal)),
        &ft,
        &mut |_| {},
    )?;
    for e in &report.epochs {
        on_event(Event::Epoch {
            row: spec.name,
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_mr: e.val.map(|v| v.mean_recall),
        });
    }
    let (eval, _) = diagnose(&model, corpus.split(Split::FinetuneTest), cfg.uniformity_t)?;
    Ok(AblationRow {
        name: spec.name.to_string(),
        freeze_mode: spec.mode.to_string(),
        objective: spec.objective.to_string(),
        lr: spec.lr,
        trainable,
        final_train_loss: report.epochs.last().map_or(report.initial_train_loss, |e| e.train_loss),
        test: eval.metrics,
        diagnostics: eval.diagnostics,
    })
}

/// Runs the protocol from `backbone` (or a freshly pretrained one). Every row starts from
/// the same backbone with the same seed and data. On failure the returned report carries the
/// completed rows and the error message.
pub fn run_ablation(
    cfg: &RunConfig,
    corpus: &Corpus,
    backbone: Option<DualEncoder>,
    on_event: &mut dyn FnMut(Event<'_>),
) -> (AblationReport, Option<CliError>) {
    let mut report = AblationReport {
        seed: cfg.seed,
        train_pairs: corpus.split(Split::FinetuneTrain).num_images(),
        test_images: corpus.split(Split::FinetuneTest).num_images(),
        ..AblationReport::default()
    };
    let test = corpus.split(Split::FinetuneTest);
    let result = (|| -> CliResult<()> {
        let random = DualEncoder::new(cfg.model_config(), cfg.seed)?;
        report.random_init_diagnostics = Some(diagnose(&random, test, cfg.uniformity_t)?.0.diagnostics);
        let backbone = match backbone {
            Some(b) => b,
            None => {
                let (m, loss) = pretrain(cfg, corpus, &mut |step, loss| on_event(Event::PretrainStep { step, loss }))?;
                report.pretrain_final_loss = loss;
                m
            }
        };
        if backbone.has_adapters() {
            return Err(CliError::Usage("ablation needs a backbone checkpoint without adapters".into()));
        }
        let (frozen, _) = diagnose(&backbone, test, cfg.uniformity_t)?;
        report.frozen_baseline = Some(frozen.metrics);
        report.frozen_diagnostics = Some(frozen.diagnostics);
        for spec in row_specs(cfg) {
            let row = run_row(&spec, cfg, &backbone, corpus, on_event)
                .map_err(|e| CliError::Runtime(format!("row {}: {e}", spec.name)))?;
            on_event(Event::RowDone(&row));
            report.rows.push(row);
        }
        Ok(())
    })();
    match result {
        Ok(()) => (report, None),
        Err(e) => {
            report.error = Some(e.to_string());
            (report, Some(e))
        }
    }
}

/// Sanity check on a finished table: each mR equals the mean of its own recall columns.
pub fn mr_consistent(report: &AblationReport) -> bool {
    report
        .rows
        .iter()
        .all(|r| (r.test.mean_recall - r.test.recompute_mean()).abs() < 1e-9)
}
