//! Experiment configuration: one TOML file describes the dataset, every
//! model, the training budgets, and the evaluation protocol. Unknown keys
//! are rejected so typos fail loudly instead of silently using defaults.

use crate::error::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::path::{Path, PathBuf};

/// Environment variable that overrides `dataset.path`.
pub const DATASET_ROOT_ENV: &str = "COMMIN_DATASET_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub jscc: JsccSection,
    pub inn: InnSection,
    pub diffusion: DiffusionSection,
    pub extractor: ExtractorSection,
    pub guidance: GuidanceSection,
    pub evaluate: EvaluateSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Base seed every train/evaluate seed derives from.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory of PNG images (see also the COMMIN_DATASET_ROOT override).
    pub path: String,
    /// Number of images `gen-dataset` synthesizes.
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Seed for both the deterministic split and dataset synthesis.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsccSection {
    /// Complex channel symbols per image; the bandwidth ratio follows from
    /// this and the image size.
    pub symbols: usize,
    /// Encoder/decoder width multiplier.
    pub base: usize,
    pub avg_power: f64,
    pub train: TrainSection,
    /// SNR range sampled per training batch, in dB.
    pub train_snr_lo_db: f64,
    pub train_snr_hi_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnSection {
    pub levels: usize,
    pub pairs: usize,
    pub hidden: usize,
    /// Clean/degraded pairs generated per channel setting.
    pub pair_count: usize,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub base: usize,
    pub emb_dim: usize,
    /// Project the sampler's clean estimate onto the data range [-1, 1]
    /// each step. Without it, small noise-prediction errors near t = T are
    /// amplified into huge clean estimates that destabilize both the plain
    /// trajectory and the guidance gradient; disable only for ablation.
    #[serde(default = "default_true")]
    pub clip_x0: bool,
    pub train: TrainSection,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSection {
    pub widths: [usize; 3],
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    /// Step-size schedule keyed by SNR. Empty means the built-in schedule.
    #[serde(default)]
    pub zeta_table: Vec<ZetaEntry>,
    /// Ablation switch: freeze the clean estimate inside the residual.
    #[serde(default)]
    pub stop_gradient_target: bool,
    /// Element count the step sizes were calibrated at; unset uses them
    /// as-is.
    #[serde(default)]
    pub reference_elements: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZetaEntry {
    pub snr_db: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub snr_grid_db: Vec<f64>,
    /// How many test-split images the grid runs over.
    pub test_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Config {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides, re-validating afterwards.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        if let Some(o) = out {
            self.output.dir = o.to_string_lossy().into_owned();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        let d = &self.dataset;
        if d.count == 0 || d.channels == 0 || d.height == 0 || d.width == 0 {
            return err("dataset dimensions and count must be positive".into());
        }
        if d.channels != 1 && d.channels != 3 {
            return err(format!("dataset channels must be 1 or 3, got {}", d.channels));
        }
        if d.height % 8 != 0 || d.width % 8 != 0 {
            return err(format!(
                "image size {}x{} must be divisible by 8 for the codec",
                d.height, d.width
            ));
        }
        let div = 1usize << self.inn.levels;
        if self.inn.levels == 0 || d.height % div != 0 || d.width % div != 0 {
            return err(format!(
                "inn levels {} need image sides divisible by {div}",
                self.inn.levels
            ));
        }
        if self.jscc.symbols == 0 || self.jscc.base == 0 {
            return err("jscc symbols and base must be positive".into());
        }
        if !(self.jscc.avg_power.is_finite() && self.jscc.avg_power > 0.0) {
            return err(format!("jscc avg_power must be positive, got {}", self.jscc.avg_power));
        }
        if self.jscc.train_snr_lo_db > self.jscc.train_snr_hi_db {
            return err("jscc training SNR range is inverted".into());
        }
        if self.inn.pairs == 0 || self.inn.hidden == 0 || self.inn.pair_count == 0 {
            return err("inn pairs, hidden width, and pair_count must be positive".into());
        }
        let diff = &self.diffusion;
        if diff.t_steps == 0 || diff.base == 0 || diff.emb_dim == 0 {
            return err("diffusion t_steps, base, and emb_dim must be positive".into());
        }
        if !(diff.beta_start > 0.0 && diff.beta_start <= diff.beta_end && diff.beta_end < 1.0) {
            return err(format!(
                "diffusion beta bounds ({}, {}) must satisfy 0 < start <= end < 1",
                diff.beta_start, diff.beta_end
            ));
        }
        if self.extractor.widths.iter().any(|&w| w == 0) {
            return err("extractor widths must be positive".into());
        }
        for t in [&self.jscc.train, &self.inn.train, &diff.train, &self.extractor.train] {
            if t.steps == 0 || t.batch == 0 || !(t.lr.is_finite() && t.lr > 0.0) {
                return err("training sections need positive steps, batch, and lr".into());
            }
        }
        for e in &self.guidance.zeta_table {
            if !(e.zeta.is_finite() && e.zeta >= 0.0 && e.snr_db.is_finite()) {
                return err(format!("bad zeta table entry ({}, {})", e.snr_db, e.zeta));
            }
        }
        if self.evaluate.snr_grid_db.is_empty() {
            return err("evaluate.snr_grid_db must not be empty".into());
        }
        if self.evaluate.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return err("evaluate.snr_grid_db entries must be finite".into());
        }
        if self.evaluate.test_images == 0 {
            return err("evaluate.test_images must be positive".into());
        }
        if self.output.dir.is_empty() {
            return err("output.dir must not be empty".into());
        }
        Ok(())
    }

    /// Dataset directory after the environment override.
    pub fn dataset_root(&self) -> PathBuf {
        match std::env::var(DATASET_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.dataset.path),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }

    /// Hash of the artifact identity: the seed plus every section that
    /// shapes training (dataset, codec, invertible network, diffusion,
    /// extractor). Evaluation settings, guidance step sizes, and the output
    /// directory vary per run without changing what was trained, so they
    /// stay outside the hash and checkpoints survive re-evaluation under
    /// new grids or step-size tables.
    pub fn config_hash(&self) -> String {
        let mut id = self.clone();
        id.output.dir = String::new();
        id.evaluate = EvaluateSection { snr_grid_db: Vec::new(), test_images: 0 };
        id.guidance = GuidanceSection {
            zeta_table: Vec::new(),
            stop_gradient_target: false,
            reference_elements: None,
        };
        let text = toml::to_string(&id).expect("config serializes");
        let mut h = sha2::Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Step size for a channel SNR: the config table when present (nearest
    /// entry, ties toward the lower SNR), the built-in schedule otherwise.
    pub fn resolve_zeta(&self, snr_db: f64) -> f64 {
        if self.guidance.zeta_table.is_empty() {
            return commin_core::guided::select_zeta(snr_db);
        }
        let mut best = &self.guidance.zeta_table[0];
        for e in &self.guidance.zeta_table[1..] {
            let closer = (snr_db - e.snr_db).abs() < (snr_db - best.snr_db).abs();
            let tie_lower =
                (snr_db - e.snr_db).abs() == (snr_db - best.snr_db).abs() && e.snr_db < best.snr_db;
            if closer || tie_lower {
                best = e;
            }
        }
        best.zeta
    }

    /// Guidance settings for one evaluation cell.
    pub fn guidance_config(&self, snr_db: f64) -> commin_core::guided::GuidanceConfig {
        commin_core::guided::GuidanceConfig {
            zeta: self.resolve_zeta(snr_db),
            stop_gradient_target: self.guidance.stop_gradient_target,
            reference_elements: self.guidance.reference_elements,
        }
    }

    /// Clean-estimate projection interval handed to the sampler.
    pub fn x0_range(&self) -> Option<(f32, f32)> {
        self.diffusion.clip_x0.then_some((-1.0, 1.0))
    }
}
