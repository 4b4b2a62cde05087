//! Stage runner: gen -> curate -> train -> eval (-> project).
//!
//! Stages communicate through files only, so any stage can be re-run or
//! resumed. Each stage is stamped with a hash of the configuration that
//! determines its outputs; re-running an unchanged stage is a no-op.
//! Wall-clock timings go to a separate file so report bundles stay
//! byte-identical across runs.

use crate::config::{OutputLayout, PipelineConfig, Stage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;
use uniret_core::curation::{curate, RetentionReport};
use uniret_core::datagen::{generate, make_imperfect_expert, make_oracle_expert};
use uniret_core::eval::{run_protocol, MetricSummary};
use uniret_core::io;
use uniret_core::nnn::NnnConfig;
use uniret_core::train::{train, EpochMetrics};
use uniret_core::{Dataset, Scalar};

#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageFailure {
    pub stage: &'static str,
    #[source]
    pub source: uniret_core::Error,
}

fn stage_err(stage: &'static str) -> impl Fn(uniret_core::Error) -> StageFailure {
    move |source| StageFailure { stage, source }
}

/// Rank-k plus mAP, without the per-query list (reports stay small).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLite {
    pub rank_k: BTreeMap<usize, f64>,
    pub map_percent: f64,
}

impl From<&MetricSummary> for MetricsLite {
    fn from(m: &MetricSummary) -> Self {
        Self {
            rank_k: m.rank_k.clone(),
            map_percent: m.map_percent,
        }
    }
}

/// Raw metrics next to the normalized ones, per the side-by-side protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalBlock {
    pub queries: usize,
    pub gallery: usize,
    pub raw: MetricsLite,
    pub nnn: Option<MetricsLite>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: EvalBlock,
    pub per_source: BTreeMap<u32, EvalBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub pairs: usize,
    pub classes: usize,
    pub final_metrics: Option<EpochMetrics>,
    pub single_identity_batches: usize,
    pub degenerate_angles: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub toolkit_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, String>,
    pub retention: Option<RetentionReport>,
    pub training: Option<TrainSummary>,
    pub eval: Option<EvalReport>,
}

/// Check the stamp and the declared outputs; a clean match means skip.
fn stage_is_fresh(layout: &OutputLayout, stage: Stage, hash: &str, outputs: &[&Path]) -> bool {
    let stamp = layout.stamp(stage);
    match std::fs::read_to_string(&stamp) {
        Ok(prev) if prev.trim() == hash => outputs.iter().all(|p| p.exists()),
        _ => false,
    }
}

fn write_stamp(layout: &OutputLayout, stage: Stage, hash: &str) -> std::io::Result<()> {
    let stamp = layout.stamp(stage);
    if let Some(parent) = stamp.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(stamp, format!("{hash}\n"))
}

pub struct PipelineOutcome {
    pub report: PipelineReport,
    /// stage name -> wall-clock seconds (only stages that actually ran).
    pub timings: BTreeMap<String, f64>,
}

/// Run the configured stages in order. Partial outputs are retained on
/// failure for debugging.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineOutcome, StageFailure> {
    let layout = OutputLayout::new(out_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| StageFailure {
        stage: "setup",
        source: e.into(),
    })?;

    let mut stages_run: BTreeMap<String, String> = BTreeMap::new();
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();

    let ordered = [Stage::Gen, Stage::Curate, Stage::Train, Stage::Eval, Stage::Project];
    for stage in ordered {
        if !cfg.stages.contains(&stage) {
            continue;
        }
        let hash = cfg.stage_hash(stage);
        let outputs = stage_outputs(&layout, cfg, stage);
        let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
        if stage_is_fresh(&layout, stage, &hash, &output_refs) {
            stages_run.insert(stage.name().into(), "skipped (fresh)".into());
            continue;
        }
        let started = Instant::now();
        match stage {
            Stage::Gen => run_gen(cfg, &layout)?,
            Stage::Curate => run_curate(cfg, &layout)?,
            Stage::Train => run_train(cfg, &layout)?,
            Stage::Eval => run_eval(cfg, &layout)?,
            Stage::Project => run_project(&layout)?,
        }
        timings.insert(stage.name().into(), started.elapsed().as_secs_f64());
        write_stamp(&layout, stage, &hash).map_err(|e| StageFailure {
            stage: stage.name(),
            source: e.into(),
        })?;
        stages_run.insert(stage.name().into(), "ran".into());
    }

    // Aggregate whatever the executed stages left on disk.
    let report = PipelineReport {
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.stage_hash(*cfg.stages.last().unwrap_or(&Stage::Eval)),
        stages: stages_run,
        retention: read_json_opt(&layout.retention_report()),
        training: read_json_opt(&layout.root.join("train_summary.json")),
        eval: read_json_opt(&layout.eval_report()),
    };
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(layout.pipeline_report(), report_json + "\n").map_err(|e| StageFailure {
        stage: "report",
        source: e.into(),
    })?;
    let timing_json = serde_json::to_string_pretty(&timings).expect("timings serialize");
    std::fs::write(layout.timings(), timing_json + "\n").map_err(|e| StageFailure {
        stage: "report",
        source: e.into(),
    })?;

    Ok(PipelineOutcome { report, timings })
}

use std::path::PathBuf;

fn stage_outputs(layout: &OutputLayout, cfg: &PipelineConfig, stage: Stage) -> Vec<PathBuf> {
    match stage {
        Stage::Gen => {
            let mut v = vec![
                layout.train_manifest(),
                layout.test_manifest(),
                layout.ground_truth(),
            ];
            for i in 0..cfg.experts.count {
                v.push(layout.expert_manifest(i));
            }
            v
        }
        Stage::Curate => vec![layout.mask(), layout.retention_report()],
        Stage::Train => vec![
            layout.checkpoint(),
            layout.metrics_csv(),
            layout.root.join("train_summary.json"),
        ],
        Stage::Eval => vec![layout.eval_report(), layout.eval_table()],
        Stage::Project => vec![layout.projection()],
    }
}

fn read_json_opt<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn run_gen(cfg: &PipelineConfig, layout: &OutputLayout) -> Result<(), StageFailure> {
    let err = stage_err("gen");
    let train_spec = cfg.train_spec();
    let (train_ds, gt) = generate::<Scalar>(&train_spec).map_err(&err)?;
    io::write_dataset(&layout.train_manifest(), &train_ds).map_err(&err)?;
    io::write_ground_truth(&layout.ground_truth(), &gt.clean).map_err(&err)?;

    let (test_ds, _) = generate::<Scalar>(&cfg.test_spec()).map_err(&err)?;
    io::write_dataset(&layout.test_manifest(), &test_ds).map_err(&err)?;

    if cfg.experts.count > 0 {
        std::fs::create_dir_all(layout.root.join("experts")).map_err(|e| StageFailure {
            stage: "gen",
            source: e.into(),
        })?;
    }
    for i in 0..cfg.experts.count {
        let expert = if i == 0 && cfg.experts.oracle_first {
            make_oracle_expert(&train_ds, &gt, i as u32).map_err(&err)?
        } else {
            make_imperfect_expert(&train_ds, &gt, cfg.experts.sigma, cfg.expert_seed(i), i as u32)
                .map_err(&err)?
        };
        io::write_expert(&layout.expert_manifest(i), &train_ds, &expert).map_err(&err)?;
    }
    Ok(())
}

fn run_curate(cfg: &PipelineConfig, layout: &OutputLayout) -> Result<(), StageFailure> {
    let err = stage_err("curate");
    let dataset: Dataset = io::read_dataset(&layout.train_manifest()).map_err(&err)?;
    let mut experts = Vec::with_capacity(cfg.experts.count);
    for i in 0..cfg.experts.count {
        experts.push(io::read_expert(&layout.expert_manifest(i), i as u32).map_err(&err)?);
    }
    let (mask, _, report) = curate(&dataset, &experts, cfg.k).map_err(&err)?;
    io::write_mask(&layout.mask(), &mask).map_err(&err)?;
    io::write_retention_report(&layout.retention_report(), &report).map_err(&err)?;
    Ok(())
}

fn run_train(cfg: &PipelineConfig, layout: &OutputLayout) -> Result<(), StageFailure> {
    let err = stage_err("train");
    let dataset: Dataset = io::read_dataset(&layout.train_manifest()).map_err(&err)?;
    let mask = io::read_mask(&layout.mask(), cfg.k).map_err(&err)?;
    let clean = dataset.filter_by(&mask.delta).map_err(&err)?;
    let train_cfg = cfg.train_config();
    let out = train(&clean, &train_cfg).map_err(&err)?;
    io::write_checkpoint(&layout.checkpoint(), &out.encoder, &out.weights, &train_cfg)
        .map_err(&err)?;
    io::write_history(&layout.metrics_csv(), &out.history).map_err(&err)?;
    let summary = TrainSummary {
        epochs: train_cfg.epochs,
        pairs: clean.len(),
        classes: clean.num_identities(),
        final_metrics: out.history.last().copied(),
        single_identity_batches: out.single_identity_batches,
        degenerate_angles: out.degenerate_angles,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(layout.root.join("train_summary.json"), text + "\n").map_err(|e| {
        StageFailure {
            stage: "train",
            source: e.into(),
        }
    })?;
    Ok(())
}

/// Evaluate a test set overall and per source; raw and normalized metrics
/// are always reported side by side when NNN is configured.
pub fn evaluate_dataset(
    encoder: &uniret_core::train::EncoderParams<Scalar>,
    test_set: &Dataset,
    nnn: Option<&NnnConfig>,
) -> uniret_core::Result<EvalReport> {
    let overall_result = run_protocol(encoder, test_set, nnn, None)?;
    let overall = EvalBlock {
        queries: test_set.len(),
        gallery: test_set.len(),
        raw: (&overall_result.raw_metrics).into(),
        nnn: overall_result.normalized_metrics.as_ref().map(Into::into),
    };
    let mut per_source = BTreeMap::new();
    for source in test_set.source_ids() {
        let keep: Vec<bool> = test_set
            .pairs()
            .iter()
            .map(|p| p.image.source_id == source)
            .collect();
        let subset = test_set.filter_by(&keep)?;
        // kappa cannot exceed the per-source query count.
        let sub_nnn = nnn.map(|c| NnnConfig {
            alpha: c.alpha,
            kappa: c.kappa.min(subset.len()),
        });
        let result = run_protocol(encoder, &subset, sub_nnn.as_ref(), None)?;
        per_source.insert(
            source,
            EvalBlock {
                queries: subset.len(),
                gallery: subset.len(),
                raw: (&result.raw_metrics).into(),
                nnn: result.normalized_metrics.as_ref().map(Into::into),
            },
        );
    }
    Ok(EvalReport {
        overall,
        per_source,
    })
}

fn run_eval(cfg: &PipelineConfig, layout: &OutputLayout) -> Result<(), StageFailure> {
    let err = stage_err("eval");
    let (encoder, _, _) = io::read_checkpoint::<Scalar>(&layout.checkpoint()).map_err(&err)?;
    let test_set: Dataset = io::read_dataset(&layout.test_manifest()).map_err(&err)?;
    let report = evaluate_dataset(&encoder, &test_set, cfg.nnn.as_ref()).map_err(&err)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(layout.eval_report(), json + "\n").map_err(|e| StageFailure {
        stage: "eval",
        source: e.into(),
    })?;
    std::fs::write(layout.eval_table(), render_table(&report)).map_err(|e| StageFailure {
        stage: "eval",
        source: e.into(),
    })?;
    Ok(())
}

fn run_project(layout: &OutputLayout) -> Result<(), StageFailure> {
    let err = stage_err("project");
    let (encoder, _, _) = io::read_checkpoint::<Scalar>(&layout.checkpoint()).map_err(&err)?;
    let test_set: Dataset = io::read_dataset(&layout.test_manifest()).map_err(&err)?;
    crate::commands::project_dataset(&encoder, &test_set, &layout.projection()).map_err(&err)
}

/// Aligned plain-text table: one row per source plus overall, Rank-1/5/10
/// and mAP, raw scores and normalized scores side by side.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let blocks: [(&str, fn(&EvalBlock) -> Option<&MetricsLite>); 2] = [
        ("raw scores", |b| Some(&b.raw)),
        ("nnn-normalized scores", |b| b.nnn.as_ref()),
    ];
    for (title, pick) in blocks {
        if pick(&report.overall).is_none() {
            continue;
        }
        out.push_str(title);
        out.push('\n');
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8}\n",
            "source", "R-1", "R-5", "R-10", "mAP"
        ));
        let mut rows: Vec<(String, &EvalBlock)> = report
            .per_source
            .iter()
            .map(|(s, b)| (s.to_string(), b))
            .collect();
        rows.push(("overall".into(), &report.overall));
        for (label, block) in rows {
            let m = pick(block).expect("block present");
            let rk = |k: usize| {
                m.rank_k
                    .get(&k)
                    .map_or_else(|| "-".into(), |v| format!("{v:.2}"))
            };
            out.push_str(&format!(
                "{:<10} {:>8} {:>8} {:>8} {:>8.2}\n",
                label,
                rk(1),
                rk(5),
                rk(10),
                m.map_percent
            ));
        }
        out.push('\n');
    }
    out
}
