//! Standalone subcommand implementations. Every subcommand also accepts a
//! JSON config file supplying defaults; explicit flags win.

use serde::Deserialize;
use std::path::{Path, PathBuf};
use uniret_core::datagen::{generate, make_imperfect_expert, make_oracle_expert, GenSpec};
use uniret_core::eval::run_protocol;
use uniret_core::io;
use uniret_core::nnn::NnnConfig;
use uniret_core::pca::project_2d;
use uniret_core::scalar::derive_seed;
use uniret_core::train::{train, EncoderParams, TrainConfig};
use uniret_core::{Dataset, Error, Result, Scalar};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// `gen`: write a dataset (manifest + blob), its ground-truth flags, and
/// optionally a frozen expert ensemble derived from the planted truth.
pub struct GenOptions {
    pub spec: PathBuf,
    pub out_dir: PathBuf,
    pub emit_experts: usize,
    pub expert_sigma: f64,
    pub oracle_first: bool,
}

pub fn run_gen(opts: &GenOptions) -> Result<()> {
    let spec: GenSpec = read_config(&opts.spec)?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let (dataset, gt) = generate::<Scalar>(&spec)?;
    io::write_dataset(&opts.out_dir.join("data.jsonl"), &dataset)?;
    io::write_ground_truth(&opts.out_dir.join("ground_truth.jsonl"), &gt.clean)?;
    if opts.emit_experts > 0 {
        std::fs::create_dir_all(opts.out_dir.join("experts"))?;
        for i in 0..opts.emit_experts {
            let expert = if i == 0 && opts.oracle_first {
                make_oracle_expert(&dataset, &gt, i as u32)?
            } else {
                make_imperfect_expert(
                    &dataset,
                    &gt,
                    opts.expert_sigma,
                    derive_seed(spec.seed, 30 + i as u64),
                    i as u32,
                )?
            };
            io::write_expert(
                &opts.out_dir.join(format!("experts/expert_{i}.jsonl")),
                &dataset,
                &expert,
            )?;
        }
    }
    println!(
        "gen: wrote {} pairs ({} identities, {} sources) to {}",
        dataset.len(),
        dataset.num_identities(),
        dataset.n_sources(),
        opts.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct CurateFileConfig {
    pub dataset: Option<PathBuf>,
    pub experts: Vec<PathBuf>,
    pub k: Option<usize>,
    pub out_mask: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub struct CurateOptions {
    pub dataset: Option<PathBuf>,
    pub experts: Vec<PathBuf>,
    pub k: Option<usize>,
    pub out_mask: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

pub fn run_curate(opts: &CurateOptions) -> Result<()> {
    let file: CurateFileConfig = match &opts.config {
        Some(path) => read_config(path)?,
        None => CurateFileConfig::default(),
    };
    let dataset_path = opts
        .dataset
        .clone()
        .or(file.dataset)
        .ok_or_else(|| invalid("curate needs --dataset"))?;
    let expert_paths = if opts.experts.is_empty() {
        file.experts
    } else {
        opts.experts.clone()
    };
    if expert_paths.is_empty() {
        return Err(invalid("curate needs at least one --expert"));
    }
    let k = opts.k.or(file.k).unwrap_or(25);
    let out_mask = opts
        .out_mask
        .clone()
        .or(file.out_mask)
        .ok_or_else(|| invalid("curate needs --out-mask"))?;
    let report_path = opts
        .report
        .clone()
        .or(file.report)
        .ok_or_else(|| invalid("curate needs --report"))?;

    let dataset: Dataset = io::read_dataset(&dataset_path)?;
    let experts = expert_paths
        .iter()
        .enumerate()
        .map(|(i, p)| io::read_expert(p, i as u32))
        .collect::<Result<Vec<_>>>()?;
    let (mask, clean, report) = uniret_core::curation::curate(&dataset, &experts, k)?;
    io::write_mask(&out_mask, &mask)?;
    io::write_retention_report(&report_path, &report)?;
    println!(
        "curate: retained {}/{} pairs ({:.2}%) at K={k} in {:.2}s",
        clean.len(),
        dataset.len(),
        report.overall.percent,
        report.wall_clock_secs
    );
    Ok(())
}

pub struct TrainOptions {
    pub dataset: PathBuf,
    pub mask: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics_out: Option<PathBuf>,
}

pub fn run_train(opts: &TrainOptions) -> Result<()> {
    let cfg: TrainConfig = match &opts.config {
        Some(path) => read_config(path)?,
        None => TrainConfig::default(),
    };
    let dataset: Dataset = io::read_dataset(&opts.dataset)?;
    let dataset = match &opts.mask {
        Some(mask_path) => {
            let mask = io::read_mask(mask_path, 0)?;
            dataset.filter_by(&mask.delta)?
        }
        None => dataset,
    };
    let out = train(&dataset, &cfg)?;
    io::write_checkpoint(&opts.out, &out.encoder, &out.weights, &cfg)?;
    let metrics_path = opts
        .metrics_out
        .clone()
        .unwrap_or_else(|| opts.out.with_extension("metrics.csv"));
    io::write_history(&metrics_path, &out.history)?;
    if let Some(last) = out.history.last() {
        println!(
            "train: {} pairs, {} epochs, final id loss {:.4}, separation {:.4}",
            dataset.len(),
            cfg.epochs,
            last.loss_ma_id,
            last.separation
        );
    } else {
        println!("train: 0 epochs, wrote seeded initialization");
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct EvalFileConfig {
    pub checkpoint: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub nnn: bool,
    pub alpha: Option<f64>,
    pub kappa: Option<usize>,
    pub reference: Option<String>,
    pub out: Option<PathBuf>,
    pub dump_scores: bool,
}

pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub nnn: bool,
    pub alpha: Option<f64>,
    pub kappa: Option<usize>,
    pub reference: Option<String>,
    pub out: Option<PathBuf>,
    pub dump_scores: bool,
    pub config: Option<PathBuf>,
}

pub fn run_eval(opts: &EvalOptions) -> Result<()> {
    let file: EvalFileConfig = match &opts.config {
        Some(path) => read_config(path)?,
        None => EvalFileConfig::default(),
    };
    let checkpoint = opts
        .checkpoint
        .clone()
        .or(file.checkpoint)
        .ok_or_else(|| invalid("eval needs --checkpoint"))?;
    let test = opts
        .test
        .clone()
        .or(file.test)
        .ok_or_else(|| invalid("eval needs --test"))?;
    let out = opts
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| invalid("eval needs --out"))?;
    let use_nnn = opts.nnn || file.nnn;
    let nnn_cfg = if use_nnn {
        Some(NnnConfig::new(
            opts.alpha.or(file.alpha).unwrap_or(0.75),
            opts.kappa.or(file.kappa).unwrap_or(16),
        )?)
    } else {
        None
    };
    let reference = opts.reference.clone().or(file.reference);
    let dump_scores = opts.dump_scores || file.dump_scores;

    let (encoder, _, _) = io::read_checkpoint::<Scalar>(&checkpoint)?;
    let test_set: Dataset = io::read_dataset(&test)?;

    // A held-out reference set replaces the transductive default.
    let reference_queries = match reference.as_deref() {
        None | Some("self") => None,
        Some(path) => {
            let refs: Dataset = io::read_dataset(Path::new(path))?;
            let mut encoded = Vec::with_capacity(refs.len());
            for pair in refs.pairs() {
                let unit = uniret_core::embedding::l2_normalize(&pair.text.vector)?;
                encoded.push(uniret_core::embedding::l2_normalize(
                    &encoder.text.forward(&unit),
                )?);
            }
            Some(encoded)
        }
    };

    let result = run_protocol(
        &encoder,
        &test_set,
        nnn_cfg.as_ref(),
        reference_queries.as_deref(),
    )?;

    let json = serde_json::json!({
        "queries": test_set.len(),
        "gallery": test_set.len(),
        "raw": result.raw_metrics,
        "nnn": result.normalized_metrics,
    });
    std::fs::write(&out, serde_json::to_string_pretty(&json)? + "\n")?;
    if dump_scores {
        io::write_scores_blob(&out.with_extension("raw_scores.bin"), &result.raw_scores)?;
        if let Some(scores) = &result.normalized_scores {
            io::write_scores_blob(&out.with_extension("nnn_scores.bin"), scores)?;
        }
    }

    let fmt = |m: &uniret_core::eval::MetricSummary| {
        let rk = |k: usize| m.rank_k.get(&k).map_or(f64::NAN, |&v| v);
        format!(
            "R-1 {:.2}  R-5 {:.2}  R-10 {:.2}  mAP {:.2}",
            rk(1),
            rk(5),
            rk(10),
            m.map_percent
        )
    };
    println!("eval raw:  {}", fmt(&result.raw_metrics));
    if let Some(n) = &result.normalized_metrics {
        println!("eval nnn:  {}", fmt(n));
    }
    Ok(())
}

pub struct ProjectOptions {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
}

/// Embed a dataset with a trained encoder and write the 2-d projection.
pub fn project_dataset(
    encoder: &EncoderParams<Scalar>,
    dataset: &Dataset,
    out: &Path,
) -> Result<()> {
    let mut embeddings = Vec::with_capacity(dataset.len() * 2);
    let mut person_ids = Vec::with_capacity(dataset.len() * 2);
    let mut source_ids = Vec::with_capacity(dataset.len() * 2);
    for pair in dataset.pairs() {
        let img = uniret_core::embedding::l2_normalize(&pair.image.vector)?;
        embeddings.push(encoder.image.forward(&img));
        person_ids.push(pair.person_id);
        source_ids.push(pair.image.source_id);
        let txt = uniret_core::embedding::l2_normalize(&pair.text.vector)?;
        embeddings.push(encoder.text.forward(&txt));
        person_ids.push(pair.person_id);
        source_ids.push(pair.text.source_id);
    }
    let points = project_2d(&embeddings)?;
    io::write_projection_csv(out, &points, &person_ids, &source_ids)
}

pub fn run_project(opts: &ProjectOptions) -> Result<()> {
    let (encoder, _, _) = io::read_checkpoint::<Scalar>(&opts.checkpoint)?;
    let dataset: Dataset = io::read_dataset(&opts.dataset)?;
    project_dataset(&encoder, &dataset, &opts.out)?;
    println!(
        "project: wrote {} points to {}",
        dataset.len() * 2,
        opts.out.display()
    );
    Ok(())
}
