//! Pipeline configuration and content addressing.
//!
//! Every random draw in a pipeline run flows from the single `seed`: the
//! generator, the test split, the experts, and the trainer get derived
//! sub-seeds. Output paths and thread counts never enter the stage hash, so
//! two runs of one config into different directories produce byte-identical
//! report bundles.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use uniret_core::datagen::GenSpec;
use uniret_core::nnn::NnnConfig;
use uniret_core::scalar::derive_seed;
use uniret_core::train::TrainConfig;

pub const TEST_SPLIT_PERSON_ID_BASE: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gen,
    Curate,
    Train,
    Eval,
    Project,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Curate => "curate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Project => "project",
        }
    }
}

/// Held-out test split dimensions; the generative world (source maps and
/// offsets) is shared with the training split, identities are fresh.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSplitConfig {
    pub identities_per_source: usize,
    pub images_per_identity: usize,
    pub texts_per_image: usize,
}

impl Default for TestSplitConfig {
    fn default() -> Self {
        Self {
            identities_per_source: 20,
            images_per_identity: 3,
            texts_per_image: 2,
        }
    }
}

/// Frozen scorer ensemble written by the gen stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertsConfig {
    pub count: usize,
    /// Give expert 0 perfect knowledge of the planted identities.
    pub oracle_first: bool,
    /// Corruption level of the non-oracle experts.
    pub sigma: f64,
}

impl Default for ExpertsConfig {
    fn default() -> Self {
        Self {
            count: 3,
            oracle_first: true,
            sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Output directory; flags and UNIRET_OUT_DIR override. Never hashed.
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads for similarity kernels. Never hashed.
    pub threads: Option<usize>,
    pub stages: Vec<Stage>,
    pub gen: GenSpec,
    pub test_split: TestSplitConfig,
    pub experts: ExpertsConfig,
    /// Retention threshold for curation.
    pub k: usize,
    pub train: TrainConfig,
    pub nnn: Option<NnnConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            seed: 7,
            deterministic: true,
            threads: None,
            stages: vec![Stage::Gen, Stage::Curate, Stage::Train, Stage::Eval],
            gen: GenSpec::standard_benchmark(),
            test_split: TestSplitConfig::default(),
            experts: ExpertsConfig::default(),
            k: 25,
            train: TrainConfig::default(),
            nnn: Some(NnnConfig::default()),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Generator spec for the training split, with derived seeds.
    pub fn train_spec(&self) -> GenSpec {
        let mut spec = self.gen.clone();
        spec.seed = derive_seed(self.seed, 10);
        spec.world_seed = Some(derive_seed(self.seed, 20));
        spec.person_id_base = 0;
        spec
    }

    /// Generator spec for the clean test split: same world, fresh identities,
    /// no caption noise, disjoint person ids.
    pub fn test_spec(&self) -> GenSpec {
        let mut spec = self.gen.clone();
        spec.identities_per_source = self.test_split.identities_per_source;
        spec.images_per_identity = self.test_split.images_per_identity;
        spec.texts_per_image = self.test_split.texts_per_image;
        spec.caption_noise_rate = vec![0.0; self.gen.n_sources];
        spec.seed = derive_seed(self.seed, 11);
        spec.world_seed = Some(derive_seed(self.seed, 20));
        spec.person_id_base = TEST_SPLIT_PERSON_ID_BASE;
        spec
    }

    /// Trainer config with the derived seed and the pipeline determinism flag.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = derive_seed(self.seed, 12);
        cfg.deterministic = self.deterministic;
        cfg
    }

    pub fn expert_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, 30 + index as u64)
    }

    /// Hash of everything that determines outputs, staged cumulatively:
    /// the hash of stage i commits to stages 0..=i.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut hasher = Sha256::new();
        hasher.update(env!("CARGO_PKG_VERSION").as_bytes());
        let semantic = serde_json::json!({
            "seed": self.seed,
            "deterministic": self.deterministic,
            "gen": self.train_spec(),
            "test_split": self.test_spec(),
            "experts": self.experts,
        });
        hasher.update(serde_json::to_vec(&semantic).expect("config serializes"));
        let upto = |s: Stage| -> Vec<u8> {
            match s {
                Stage::Gen => Vec::new(),
                Stage::Curate => serde_json::to_vec(&serde_json::json!({"k": self.k})).unwrap(),
                Stage::Train => serde_json::to_vec(&self.train_config()).unwrap(),
                Stage::Eval => serde_json::to_vec(&self.nnn).unwrap(),
                Stage::Project => b"project".to_vec(),
            }
        };
        for s in [Stage::Gen, Stage::Curate, Stage::Train, Stage::Eval, Stage::Project] {
            hasher.update(upto(s));
            hasher.update([0u8]);
            if s == stage {
                break;
            }
        }
        hex_digest(hasher)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Canonical output paths inside a pipeline directory.
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("train_data.jsonl")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.root.join("test_data.jsonl")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("ground_truth.jsonl")
    }

    pub fn expert_manifest(&self, index: usize) -> PathBuf {
        self.root.join(format!("experts/expert_{index}.jsonl"))
    }

    pub fn mask(&self) -> PathBuf {
        self.root.join("mask.jsonl")
    }

    pub fn retention_report(&self) -> PathBuf {
        self.root.join("retention_report.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.ckpt")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }

    pub fn eval_table(&self) -> PathBuf {
        self.root.join("eval_report.txt")
    }

    pub fn projection(&self) -> PathBuf {
        self.root.join("projection.csv")
    }

    pub fn pipeline_report(&self) -> PathBuf {
        self.root.join("pipeline_report.json")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    pub fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join(format!(".stamps/{}.hash", stage.name()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_hash_changes_with_seed_and_stage_config() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        b.seed = 8;
        assert_ne!(a.stage_hash(Stage::Gen), b.stage_hash(Stage::Gen));

        let mut c = PipelineConfig::default();
        c.k = 10;
        // K only affects curate and later.
        assert_eq!(a.stage_hash(Stage::Gen), c.stage_hash(Stage::Gen));
        assert_ne!(a.stage_hash(Stage::Curate), c.stage_hash(Stage::Curate));
    }

    #[test]
    fn out_dir_is_not_hashed() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        b.out_dir = Some(PathBuf::from("/somewhere/else"));
        b.threads = Some(1);
        assert_eq!(a.stage_hash(Stage::Eval), b.stage_hash(Stage::Eval));
    }

    #[test]
    fn splits_share_world_but_not_population() {
        let cfg = PipelineConfig::default();
        let train = cfg.train_spec();
        let test = cfg.test_spec();
        assert_eq!(train.world_seed, test.world_seed);
        assert_ne!(train.seed, test.seed);
        assert!(test.caption_noise_rate.iter().all(|&r| r == 0.0));
        assert_eq!(test.person_id_base, TEST_SPLIT_PERSON_ID_BASE);
    }
}
