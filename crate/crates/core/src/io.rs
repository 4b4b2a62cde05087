//! File formats.
//!
//! Embedding sets are a JSONL manifest plus a little-endian f32 blob; the
//! manifest's `offset` counts floats, so record i's vector starts at byte
//! `offset * 4`. Vectors are stored unnormalized and readers normalize on
//! load. A paired dataset interleaves one image and one text record per
//! pair; readers rebuild pair i from the i-th image and i-th text record in
//! manifest order.
//!
//! Checkpoints are a single JSON header line followed by an f32 parameter
//! blob in [`crate::train::flatten_params`] order.

use crate::curation::{CurationMask, RetentionReport};
use crate::embedding::{EmbeddingRecord, Modality, Pair, PairedDataset};
use crate::error::{Error, Result};
use crate::loss::ClassWeights;
use crate::scalar::Real;
use crate::train::{
    assign_from_flat, flatten_params, EncoderParams, EpochMetrics, TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub person_id: u32,
    pub source_id: u32,
    pub modality: Modality,
    /// Offset of the vector in the blob, in floats.
    pub offset: u64,
    pub dim: usize,
}

/// Blob path convention: the manifest's stem with a `.bin` extension.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn file_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Write records as manifest + blob, assigning offsets in iteration order.
pub fn write_records<'a, F: Real + 'a>(
    manifest_path: &Path,
    records: impl IntoIterator<Item = &'a EmbeddingRecord<F>>,
) -> Result<()> {
    let blob_path = blob_path_for(manifest_path);
    let mut manifest = BufWriter::new(File::create(manifest_path)?);
    let mut blob = BufWriter::new(File::create(&blob_path)?);
    let mut offset = 0u64;
    for record in records {
        let entry = ManifestEntry {
            sample_id: record.sample_id,
            person_id: record.person_id,
            source_id: record.source_id,
            modality: record.modality,
            offset,
            dim: record.vector.len(),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
        for x in &record.vector {
            let v = x.to_f32().unwrap_or(f32::NAN);
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += record.vector.len() as u64;
    }
    manifest.flush()?;
    blob.flush()?;
    Ok(())
}

/// Read records, normalizing every vector on load.
pub fn read_records<F: Real>(manifest_path: &Path) -> Result<Vec<EmbeddingRecord<F>>> {
    let blob_path = blob_path_for(manifest_path);
    let mut blob_bytes = Vec::new();
    File::open(&blob_path)?.read_to_end(&mut blob_bytes)?;
    if blob_bytes.len() % 4 != 0 {
        return Err(file_err(&blob_path, "blob length is not a multiple of 4"));
    }
    let floats: Vec<f32> = blob_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let reader = BufReader::new(File::open(manifest_path)?);
    let mut records = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| file_err(manifest_path, format!("line {}: {e}", line_no + 1)))?;
        let start = entry.offset as usize;
        let end = start + entry.dim;
        if end > floats.len() {
            return Err(file_err(
                manifest_path,
                format!(
                    "record {} points past the blob ({} floats)",
                    entry.sample_id,
                    floats.len()
                ),
            ));
        }
        let raw: Vec<F> = floats[start..end]
            .iter()
            .map(|&x| F::from_f32(x).expect("f32 fits any Real"))
            .collect();
        let vector = crate::embedding::l2_normalize(&raw).map_err(|_| {
            file_err(
                manifest_path,
                format!("record {} has a zero vector", entry.sample_id),
            )
        })?;
        records.push(EmbeddingRecord {
            sample_id: entry.sample_id,
            person_id: entry.person_id,
            source_id: entry.source_id,
            modality: entry.modality,
            vector,
        });
    }
    Ok(records)
}

/// Write a paired dataset: image record then text record, per pair.
pub fn write_dataset<F: Real>(manifest_path: &Path, dataset: &PairedDataset<F>) -> Result<()> {
    let records = dataset
        .pairs()
        .iter()
        .flat_map(|p| [&p.image, &p.text]);
    write_records(manifest_path, records)
}

/// Rebuild a paired dataset: pair i is the i-th image with the i-th text.
pub fn read_dataset<F: Real>(manifest_path: &Path) -> Result<PairedDataset<F>> {
    let records = read_records::<F>(manifest_path)?;
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for r in records {
        match r.modality {
            Modality::Image => images.push(r),
            Modality::Text => texts.push(r),
        }
    }
    if images.len() != texts.len() {
        return Err(file_err(
            manifest_path,
            format!(
                "unpaired records: {} images vs {} texts",
                images.len(),
                texts.len()
            ),
        ));
    }
    let pairs = images
        .into_iter()
        .zip(texts)
        .map(|(image, text)| Pair {
            person_id: image.person_id,
            image,
            text,
        })
        .collect();
    PairedDataset::new(pairs)
}

/// Load an expert's embedding tables from an embedding file. The expert id
/// is assigned by the caller (experts are ordered CLI arguments).
pub fn read_expert<F: Real>(
    manifest_path: &Path,
    expert_id: u32,
) -> Result<crate::curation::ExpertScorer<F>> {
    let records = read_records::<F>(manifest_path)?;
    let mut texts = HashMap::new();
    let mut images = HashMap::new();
    for r in records {
        match r.modality {
            Modality::Image => images.insert(r.sample_id, r.vector),
            Modality::Text => texts.insert(r.sample_id, r.vector),
        };
    }
    crate::curation::ExpertScorer::new(expert_id, texts, images)
}

/// Write an expert's tables in the embedding format.
pub fn write_expert<F: Real>(
    manifest_path: &Path,
    dataset: &PairedDataset<F>,
    expert: &crate::curation::ExpertScorer<F>,
) -> Result<()> {
    let mut records = Vec::with_capacity(dataset.len() * 2);
    for pair in dataset.pairs() {
        let image = expert
            .image_embedding(pair.image.sample_id)
            .ok_or(Error::MissingEmbedding {
                expert_id: expert.expert_id,
                modality: Modality::Image,
                sample_id: pair.image.sample_id,
            })?;
        let text = expert
            .text_embedding(pair.text.sample_id)
            .ok_or(Error::MissingEmbedding {
                expert_id: expert.expert_id,
                modality: Modality::Text,
                sample_id: pair.text.sample_id,
            })?;
        records.push(EmbeddingRecord {
            sample_id: pair.image.sample_id,
            person_id: pair.person_id,
            source_id: pair.image.source_id,
            modality: Modality::Image,
            vector: image.to_vec(),
        });
        records.push(EmbeddingRecord {
            sample_id: pair.text.sample_id,
            person_id: pair.person_id,
            source_id: pair.text.source_id,
            modality: Modality::Text,
            vector: text.to_vec(),
        });
    }
    write_records(manifest_path, records.iter())
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskLine {
    pair_id: u64,
    delta: u8,
    ranks: Vec<usize>,
}

/// Mask file: one JSON object per pair with its flag and per-expert ranks.
pub fn write_mask(path: &Path, mask: &CurationMask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, (&delta, ranks)) in mask.delta.iter().zip(&mask.ranks).enumerate() {
        let line = MaskLine {
            pair_id: i as u64,
            delta: u8::from(delta),
            ranks: ranks.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a mask file back; `k` is not stored in the file and must be supplied.
pub fn read_mask(path: &Path, k: usize) -> Result<CurationMask> {
    let reader = BufReader::new(File::open(path)?);
    let mut delta = Vec::new();
    let mut ranks = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: MaskLine = serde_json::from_str(&line)
            .map_err(|e| file_err(path, format!("line {}: {e}", line_no + 1)))?;
        if parsed.pair_id as usize != delta.len() {
            return Err(file_err(
                path,
                format!("pair ids must be dense; got {} at line {}", parsed.pair_id, line_no + 1),
            ));
        }
        delta.push(parsed.delta != 0);
        ranks.push(parsed.ranks);
    }
    Ok(CurationMask { delta, ranks, k })
}

/// Retention report as pretty JSON (timing is reported separately).
pub fn write_retention_report(path: &Path, report: &RetentionReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthLine {
    pair_id: u64,
    clean: bool,
}

/// Ground-truth flags, one JSON object per pair.
pub fn write_ground_truth(path: &Path, clean: &[bool]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, &c) in clean.iter().enumerate() {
        serde_json::to_writer(
            &mut w,
            &GroundTruthLine {
                pair_id: i as u64,
                clean: c,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<bool>> {
    let reader = BufReader::new(File::open(path)?);
    let mut clean = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GroundTruthLine = serde_json::from_str(&line)
            .map_err(|e| file_err(path, format!("line {}: {e}", line_no + 1)))?;
        if parsed.pair_id as usize != clean.len() {
            return Err(file_err(path, "pair ids must be dense"));
        }
        clean.push(parsed.clean);
    }
    Ok(clean)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    in_dim: usize,
    embed_dim: usize,
    hidden_dim: Option<usize>,
    num_classes: usize,
    blob_len: usize,
    config: TrainConfig,
}

/// Checkpoint: one JSON header line, then the f32 parameter blob.
pub fn write_checkpoint<F: Real>(
    path: &Path,
    encoder: &EncoderParams<F>,
    weights: &ClassWeights<F>,
    config: &TrainConfig,
) -> Result<()> {
    let flat = flatten_params(encoder, weights);
    let header = CheckpointHeader {
        format_version: crate::CHECKPOINT_FORMAT_VERSION,
        in_dim: encoder.in_dim(),
        embed_dim: encoder.out_dim(),
        hidden_dim: encoder.image.hidden.as_ref().map(|h| h.out_dim()),
        num_classes: weights.num_classes(),
        blob_len: flat.len(),
        config: config.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for x in &flat {
        w.write_all(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back into encoder parameters and class weights.
pub fn read_checkpoint<F: Real>(
    path: &Path,
) -> Result<(EncoderParams<F>, ClassWeights<F>, TrainConfig)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: CheckpointHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| file_err(path, format!("bad header: {e}")))?;
    if header.format_version != crate::CHECKPOINT_FORMAT_VERSION {
        return Err(file_err(
            path,
            format!("unsupported checkpoint version {}", header.format_version),
        ));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    if blob.len() != header.blob_len * 4 {
        return Err(file_err(
            path,
            format!(
                "blob length {} does not match header ({} floats)",
                blob.len(),
                header.blob_len
            ),
        ));
    }
    let flat: Vec<F> = blob
        .chunks_exact(4)
        .map(|b| {
            F::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])).expect("f32 fits any Real")
        })
        .collect();
    let mut encoder = EncoderParams::<F>::init(header.in_dim, header.embed_dim, header.hidden_dim, 0);
    let mut weights = ClassWeights::<F>::random_unit(header.num_classes, header.embed_dim, 0)?;
    assign_from_flat(&mut encoder, &mut weights, &flat)?;
    Ok((encoder, weights, header.config))
}

/// Metrics history CSV: epoch, losses, and separation statistics.
pub fn write_history(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss_ma_id,loss_align,intra,inter,separation")?;
    for m in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.epoch, m.loss_ma_id, m.loss_align, m.intra, m.inter, m.separation
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Row-major f32 score dump.
pub fn write_scores_blob<F: Real>(
    path: &Path,
    scores: &crate::embedding::SimilarityMatrix<F>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for x in scores.values() {
        w.write_all(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of 2-d projected points with identity and source labels.
pub fn write_projection_csv(
    path: &Path,
    points: &[[f64; 2]],
    person_ids: &[u32],
    source_ids: &[u32],
) -> Result<()> {
    if points.len() != person_ids.len() || points.len() != source_ids.len() {
        return Err(Error::LengthMismatch {
            left: points.len(),
            right: person_ids.len().min(source_ids.len()),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,person_id,source_id")?;
    for ((p, &pid), &sid) in points.iter().zip(person_ids).zip(source_ids) {
        writeln!(w, "{},{},{},{}", p[0], p[1], pid, sid)?;
    }
    w.flush()?;
    Ok(())
}
