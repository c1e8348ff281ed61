//! Orchestration: builds models from config, runs the training
//! subcommands, and sweeps the SNR grid for evaluation. Every random
//! stream is derived from the run seed plus a fixed purpose path, so any
//! subcommand rerun with the same config and seed reproduces its output.

use crate::checkpoint::{self, load_checkpoint, save_checkpoint};
use crate::config::Config;
use crate::dataset::load_dataset;
use crate::error::{HarnessError, Result};
use commin_core::channel::noise_sigma_sq;
use commin_core::diffusion::{train_denoiser, Denoiser, DenoiserArch, DiffusionTrainConfig, NoiseSchedule, TrainStats};
use commin_core::guided::commin_sample;
use commin_core::inn::{train_inn, Inn, InnArch, InnTrainConfig};
use commin_core::jscc::{train_jscc, Jscc, JsccArch, JsccTrainConfig};
use commin_core::metrics::{perceptual_distance, psnr, to_unit_range, train_extractor, ExtractorArch, ExtractorTrainConfig, FeatureExtractor};
use commin_core::rng::{derive_seed, rng_from_seed};
use commin_core::TensorF32;
use std::io::Write;
use std::path::{Path, PathBuf};

// Purpose tags for seed derivation; never reorder these.
const SEED_JSCC: u64 = 1;
const SEED_PAIRS: u64 = 2;
const SEED_INN: u64 = 3;
const SEED_DIFFUSION: u64 = 4;
const SEED_EXTRACTOR: u64 = 5;
const SEED_EVAL_CHANNEL: u64 = 6;
const SEED_EVAL_SAMPLE: u64 = 7;

/// Results file column order.
pub const RESULT_COLUMNS: &str = "method,snr_db,rho,image_id,psnr_db,perceptual,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub snr_db: f64,
    pub rho: f64,
    pub image_id: String,
    pub psnr_db: f64,
    pub perceptual: f64,
    pub seed: u64,
}

impl ResultRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{:.7},{},{:.6},{:.6},{}",
            self.method,
            snr_label(self.snr_db),
            self.rho,
            self.image_id,
            self.psnr_db,
            self.perceptual,
            self.seed
        )
    }

    fn parse(line: &str) -> Option<ResultRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return None;
        }
        Some(ResultRow {
            method: parts[0].to_string(),
            snr_db: parts[1].parse().ok()?,
            rho: parts[2].parse().ok()?,
            image_id: parts[3].to_string(),
            psnr_db: parts[4].parse().ok()?,
            perceptual: parts[5].parse().ok()?,
            seed: parts[6].parse().ok()?,
        })
    }
}

/// SNR rendered for file names and CSV cells: `-5`, `1`, `-4.5`.
pub fn snr_label(snr_db: f64) -> String {
    format!("{snr_db}")
}

pub fn checkpoint_dir(cfg: &Config) -> PathBuf {
    cfg.output_dir().join("checkpoints")
}

pub fn jscc_path(cfg: &Config) -> PathBuf {
    checkpoint_dir(cfg).join("jscc.ckpt")
}

pub fn denoiser_path(cfg: &Config) -> PathBuf {
    checkpoint_dir(cfg).join("denoiser.ckpt")
}

pub fn extractor_path(cfg: &Config) -> PathBuf {
    checkpoint_dir(cfg).join("extractor.ckpt")
}

pub fn pairs_path(cfg: &Config, snr_db: f64) -> PathBuf {
    checkpoint_dir(cfg).join(format!("pairs_snr_{}.ckpt", snr_label(snr_db)))
}

pub fn inn_path(cfg: &Config, snr_db: f64) -> PathBuf {
    checkpoint_dir(cfg).join(format!("inn_snr_{}.ckpt", snr_label(snr_db)))
}

pub fn results_path(cfg: &Config) -> PathBuf {
    cfg.output_dir().join("results.csv")
}

fn jscc_arch(cfg: &Config) -> JsccArch {
    JsccArch {
        channels: cfg.dataset.channels,
        height: cfg.dataset.height,
        width: cfg.dataset.width,
        symbols: cfg.jscc.symbols,
        base: cfg.jscc.base,
        avg_power: cfg.jscc.avg_power,
    }
}

fn inn_arch(cfg: &Config) -> InnArch {
    InnArch {
        channels: cfg.dataset.channels,
        levels: cfg.inn.levels,
        pairs: cfg.inn.pairs,
        hidden: cfg.inn.hidden,
    }
}

fn denoiser_arch(cfg: &Config) -> DenoiserArch {
    DenoiserArch {
        channels: cfg.dataset.channels,
        base: cfg.diffusion.base,
        emb_dim: cfg.diffusion.emb_dim,
    }
}

fn extractor_arch(cfg: &Config) -> ExtractorArch {
    ExtractorArch {
        channels: cfg.dataset.channels,
        widths: cfg.extractor.widths,
        classes: commin_core::metrics::DEGRADATION_CLASSES,
    }
}

fn schedule(cfg: &Config) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::linear(
        cfg.diffusion.t_steps,
        cfg.diffusion.beta_start,
        cfg.diffusion.beta_end,
    )?)
}

/// Loads the trained codec or explains which subcommand produces it.
pub fn load_jscc(cfg: &Config) -> Result<Jscc<f32>> {
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_JSCC, 0]));
    let mut jscc = Jscc::new("jscc", &mut rng, jscc_arch(cfg))?;
    let ckpt = load_checkpoint(&jscc_path(cfg), checkpoint::KIND_JSCC, &cfg.config_hash())?;
    commin_core::nn::load_params(&mut jscc, ckpt.into_map())?;
    Ok(jscc)
}

pub fn load_denoiser(cfg: &Config) -> Result<Denoiser<f32>> {
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_DIFFUSION, 0]));
    let mut den = Denoiser::new("den", &mut rng, denoiser_arch(cfg));
    let ckpt = load_checkpoint(&denoiser_path(cfg), checkpoint::KIND_DENOISER, &cfg.config_hash())?;
    commin_core::nn::load_params(&mut den, ckpt.into_map())?;
    Ok(den)
}

pub fn load_extractor(cfg: &Config) -> Result<FeatureExtractor<f32>> {
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_EXTRACTOR, 0]));
    let mut ext = FeatureExtractor::new("ext", &mut rng, extractor_arch(cfg));
    let ckpt =
        load_checkpoint(&extractor_path(cfg), checkpoint::KIND_EXTRACTOR, &cfg.config_hash())?;
    commin_core::nn::load_params(&mut ext, ckpt.into_map())?;
    Ok(ext)
}

pub fn load_inn(cfg: &Config, snr_db: f64) -> Result<Inn<f32>> {
    let path = inn_path(cfg, snr_db);
    if !path.is_file() {
        return Err(HarnessError::MissingArtifact(format!(
            "channel-matched INN for SNR {} dB at {} (run gen-pairs and train-inn for that SNR)",
            snr_label(snr_db),
            path.display()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_INN, snr_db.to_bits(), 0]));
    let mut inn = Inn::new("inn", &mut rng, inn_arch(cfg));
    let ckpt = load_checkpoint(&path, checkpoint::KIND_INN, &cfg.config_hash())?;
    match ckpt.manifest.setting_snr_db {
        Some(s) if s == snr_db => {}
        other => {
            return Err(HarnessError::Checkpoint(format!(
                "{}: tagged for SNR {:?}, expected {}",
                path.display(),
                other,
                snr_label(snr_db)
            )))
        }
    }
    commin_core::nn::load_params(&mut inn, ckpt.into_map())?;
    Ok(inn)
}

fn progress(label: &str, steps: usize) -> impl FnMut(usize, f64) + '_ {
    let every = (steps / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step + 1 == steps {
            println!("{label}: step {:>6}/{} loss {loss:.6}", step + 1, steps);
        }
    }
}

fn report_stats(label: &str, stats: &TrainStats) {
    println!(
        "{label}: initial loss {:.6}, final loss {:.6} ({:.3}x)",
        stats.initial,
        stats.last,
        stats.last / stats.initial.max(1e-12)
    );
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainSummary {
    label: String,
    initial: f64,
    last: f64,
}

/// Sidecar path recording a checkpoint's training losses.
pub fn summary_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".train.toml");
    PathBuf::from(os)
}

fn save_train_summary(ckpt: &Path, label: &str, stats: &TrainStats) -> Result<()> {
    let s = TrainSummary { label: label.into(), initial: stats.initial, last: stats.last };
    let text = toml::to_string(&s).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(summary_path(ckpt), text)?;
    Ok(())
}

/// Training losses recorded beside a checkpoint when it was produced.
pub fn read_train_summary(ckpt: &Path) -> Result<TrainStats> {
    let path = summary_path(ckpt);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        HarnessError::MissingArtifact(format!("{} ({e}; retrain to record it)", path.display()))
    })?;
    let s: TrainSummary =
        toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(TrainStats { initial: s.initial, last: s.last })
}

pub fn cmd_gen_dataset(cfg: &Config) -> Result<()> {
    let dir = cfg.dataset_root();
    let n = crate::synth::generate_dataset(cfg, &dir)?;
    println!("wrote {n} images to {}", dir.display());
    Ok(())
}

pub fn cmd_train_jscc(cfg: &Config) -> Result<TrainStats> {
    let data = load_dataset(cfg)?;
    let images = data.train_tensors();
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_JSCC, 0]));
    let mut jscc = Jscc::new("jscc", &mut rng, jscc_arch(cfg))?;
    let train_cfg = JsccTrainConfig {
        steps: cfg.jscc.train.steps,
        batch: cfg.jscc.train.batch,
        lr: cfg.jscc.train.lr,
        snr_lo_db: cfg.jscc.train_snr_lo_db,
        snr_hi_db: cfg.jscc.train_snr_hi_db,
    };
    let mut train_rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_JSCC, 1]));
    let stats = train_jscc(
        &mut jscc,
        &images,
        &train_cfg,
        &mut train_rng,
        &mut progress("train-jscc", train_cfg.steps),
    )?;
    report_stats("train-jscc", &stats);
    save_checkpoint(
        &jscc_path(cfg),
        checkpoint::KIND_JSCC,
        &cfg.config_hash(),
        None,
        &commin_core::nn::named_params(&jscc),
    )?;
    save_train_summary(&jscc_path(cfg), "train-jscc", &stats)?;
    println!("saved {}", jscc_path(cfg).display());
    Ok(stats)
}

/// Builds (clean, degraded) pairs through the trained codec at one SNR.
pub fn cmd_gen_pairs(cfg: &Config, snrs: &[f64]) -> Result<()> {
    let jscc = load_jscc(cfg)?;
    let data = load_dataset(cfg)?;
    if data.train.is_empty() {
        return Err(HarnessError::Dataset("train split is empty".into()));
    }
    for &snr in snrs {
        let sigma_sq = noise_sigma_sq(cfg.jscc.avg_power, snr)?;
        let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_PAIRS, snr.to_bits()]));
        let mut arrays: Vec<(String, TensorF32)> = Vec::with_capacity(cfg.inn.pair_count * 2);
        for i in 0..cfg.inn.pair_count {
            let x = &data.train[i % data.train.len()].data;
            let y = jscc.transmit(x, sigma_sq, &mut rng)?;
            arrays.push((format!("p{i:05}.x"), x.clone()));
            arrays.push((format!("p{i:05}.y"), y));
        }
        let path = pairs_path(cfg, snr);
        save_checkpoint(&path, checkpoint::KIND_PAIRS, &cfg.config_hash(), Some(snr), &arrays)?;
        println!("saved {} ({} pairs)", path.display(), cfg.inn.pair_count);
    }
    Ok(())
}

pub fn cmd_train_inn(cfg: &Config, snrs: &[f64]) -> Result<Vec<TrainStats>> {
    let mut all = Vec::with_capacity(snrs.len());
    for &snr in snrs {
        let path = pairs_path(cfg, snr);
        if !path.is_file() {
            return Err(HarnessError::MissingArtifact(format!(
                "training pairs for SNR {} dB at {} (run gen-pairs for that SNR)",
                snr_label(snr),
                path.display()
            )));
        }
        let ckpt = load_checkpoint(&path, checkpoint::KIND_PAIRS, &cfg.config_hash())?;
        let mut by_name = ckpt.into_map();
        let mut pairs = Vec::with_capacity(cfg.inn.pair_count);
        for i in 0..cfg.inn.pair_count {
            let x = by_name.remove(&format!("p{i:05}.x"));
            let y = by_name.remove(&format!("p{i:05}.y"));
            match (x, y) {
                (Some(x), Some(y)) => pairs.push((x.into_dyn(), y.into_dyn())),
                _ => {
                    return Err(HarnessError::Checkpoint(format!(
                        "{}: pair {i} incomplete",
                        path.display()
                    )))
                }
            }
        }
        let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_INN, snr.to_bits(), 0]));
        let mut inn = Inn::new("inn", &mut rng, inn_arch(cfg));
        let train_cfg = InnTrainConfig {
            steps: cfg.inn.train.steps,
            batch: cfg.inn.train.batch,
            lr: cfg.inn.train.lr,
        };
        let mut train_rng =
            rng_from_seed(derive_seed(cfg.run.seed, &[SEED_INN, snr.to_bits(), 1]));
        let label = format!("train-inn[{} dB]", snr_label(snr));
        let stats = train_inn(
            &mut inn,
            &pairs,
            &train_cfg,
            &mut train_rng,
            &mut progress(&label, train_cfg.steps),
        )?;
        report_stats(&label, &stats);
        save_checkpoint(
            &inn_path(cfg, snr),
            checkpoint::KIND_INN,
            &cfg.config_hash(),
            Some(snr),
            &commin_core::nn::named_params(&inn),
        )?;
        save_train_summary(&inn_path(cfg, snr), &label, &stats)?;
        println!("saved {}", inn_path(cfg, snr).display());
        all.push(stats);
    }
    Ok(all)
}

pub fn cmd_train_diffusion(cfg: &Config) -> Result<TrainStats> {
    let data = load_dataset(cfg)?;
    let images = data.train_tensors();
    let sched = schedule(cfg)?;
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_DIFFUSION, 0]));
    let mut den = Denoiser::new("den", &mut rng, denoiser_arch(cfg));
    let train_cfg = DiffusionTrainConfig {
        steps: cfg.diffusion.train.steps,
        batch: cfg.diffusion.train.batch,
        lr: cfg.diffusion.train.lr,
    };
    let mut train_rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_DIFFUSION, 1]));
    let stats = train_denoiser(
        &mut den,
        &sched,
        &images,
        &train_cfg,
        &mut train_rng,
        &mut progress("train-diffusion", train_cfg.steps),
    )?;
    report_stats("train-diffusion", &stats);
    save_checkpoint(
        &denoiser_path(cfg),
        checkpoint::KIND_DENOISER,
        &cfg.config_hash(),
        None,
        &commin_core::nn::named_params(&den),
    )?;
    save_train_summary(&denoiser_path(cfg), "train-diffusion", &stats)?;
    println!("saved {}", denoiser_path(cfg).display());
    Ok(stats)
}

pub fn cmd_train_extractor(cfg: &Config) -> Result<TrainStats> {
    let data = load_dataset(cfg)?;
    let images = data.train_tensors();
    let mut rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_EXTRACTOR, 0]));
    let mut ext = FeatureExtractor::new("ext", &mut rng, extractor_arch(cfg));
    let train_cfg = ExtractorTrainConfig {
        steps: cfg.extractor.train.steps,
        batch: cfg.extractor.train.batch,
        lr: cfg.extractor.train.lr,
    };
    let mut train_rng = rng_from_seed(derive_seed(cfg.run.seed, &[SEED_EXTRACTOR, 1]));
    let stats = train_extractor(
        &mut ext,
        &images,
        &train_cfg,
        &mut train_rng,
        &mut progress("train-extractor", train_cfg.steps),
    )?;
    report_stats("train-extractor", &stats);
    save_checkpoint(
        &extractor_path(cfg),
        checkpoint::KIND_EXTRACTOR,
        &cfg.config_hash(),
        None,
        &commin_core::nn::named_params(&ext),
    )?;
    save_train_summary(&extractor_path(cfg), "train-extractor", &stats)?;
    println!("saved {}", extractor_path(cfg).display());
    Ok(stats)
}

/// Reads rows already present in a results file, tolerating a truncated
/// final line from an interrupted run.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() || line == RESULT_COLUMNS {
            continue;
        }
        if let Some(row) = ResultRow::parse(line) {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Runs the full grid: every (SNR, test image) cell gets one plain-codec
/// row and one guided-restoration row. Existing rows are kept and skipped,
/// so an interrupted sweep resumes without duplicates.
pub fn cmd_evaluate(cfg: &Config) -> Result<PathBuf> {
    let data = load_dataset(cfg)?;
    let jscc = load_jscc(cfg)?;
    let den = load_denoiser(cfg)?;
    let ext = load_extractor(cfg)?;
    let sched = schedule(cfg)?;
    let hash = cfg.config_hash();

    let mut grid = cfg.evaluate.snr_grid_db.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    // Per-setting restorers load up front so a missing one fails fast.
    let mut inns = Vec::with_capacity(grid.len());
    for &snr in &grid {
        inns.push(load_inn(cfg, snr)?);
    }

    let n_images = cfg.evaluate.test_images.min(data.test.len());
    if n_images < cfg.evaluate.test_images {
        eprintln!(
            "warning: test split holds {} images, config asked for {}",
            data.test.len(),
            cfg.evaluate.test_images
        );
    }
    let images = &data.test[..n_images];
    let rho = commin_core::channel::bandwidth_ratio(
        cfg.dataset.channels * cfg.dataset.height * cfg.dataset.width,
        cfg.jscc.symbols,
    );

    std::fs::create_dir_all(cfg.output_dir())?;
    let path = results_path(cfg);
    let mut done: std::collections::HashSet<(String, String, String)> =
        std::collections::HashSet::new();
    let mut needs_newline = false;
    if path.is_file() {
        for row in read_results(&path)? {
            done.insert((row.method.clone(), snr_label(row.snr_db), row.image_id.clone()));
        }
        let bytes = std::fs::read(&path)?;
        needs_newline = !bytes.is_empty() && *bytes.last().unwrap() != b'\n';
    } else {
        std::fs::write(&path, format!("# config {hash}\n{RESULT_COLUMNS}\n"))?;
    }
    let mut file = std::fs::OpenOptions::new().append(true).open(&path)?;
    if needs_newline {
        // An interrupted run left a partial row; terminate it so the next
        // append starts on a fresh line (the partial row parses as nothing).
        file.write_all(b"\n")?;
    }
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.output_dir().join("run.log"))?;

    let mut written = 0usize;
    for (snr_idx, &snr) in grid.iter().enumerate() {
        let sigma_sq = noise_sigma_sq(cfg.jscc.avg_power, snr)?;
        let guidance = cfg.guidance_config(snr);
        for (img_idx, item) in images.iter().enumerate() {
            let x = &item.data;
            let channel_seed =
                derive_seed(cfg.run.seed, &[SEED_EVAL_CHANNEL, snr.to_bits(), img_idx as u64]);
            let y = jscc.transmit(x, sigma_sq, &mut rng_from_seed(channel_seed))?;

            let jscc_key = ("deepjscc".to_string(), snr_label(snr), item.id.clone());
            if !done.contains(&jscc_key) {
                let row = ResultRow {
                    method: "deepjscc".into(),
                    snr_db: snr,
                    rho,
                    image_id: item.id.clone(),
                    psnr_db: psnr(&to_unit_range(&y), &to_unit_range(x))?,
                    perceptual: perceptual_distance(&ext, &y, x)?,
                    seed: channel_seed,
                };
                file.write_all(format!("{}\n", row.to_line()).as_bytes())?;
                file.flush()?;
                done.insert(jscc_key);
                written += 1;
            }

            let commin_key = ("commin".to_string(), snr_label(snr), item.id.clone());
            if !done.contains(&commin_key) {
                let sample_seed =
                    derive_seed(cfg.run.seed, &[SEED_EVAL_SAMPLE, snr.to_bits(), img_idx as u64]);
                let restored = commin_sample(
                    &y,
                    &den,
                    &inns[snr_idx],
                    &sched,
                    &guidance,
                    &mut rng_from_seed(sample_seed),
                    cfg.x0_range(),
                )?;
                if restored.iter().any(|v| !v.is_finite()) {
                    eprintln!(
                        "warning: guided sampling diverged at SNR {} dB, image {} \
                         (metrics for this row will be NaN)",
                        snr_label(snr),
                        item.id
                    );
                }
                writeln!(
                    log,
                    "commin snr_db={} image={} seed={sample_seed} zeta={} config={hash}",
                    snr_label(snr),
                    item.id,
                    guidance.zeta
                )?;
                let row = ResultRow {
                    method: "commin".into(),
                    snr_db: snr,
                    rho,
                    image_id: item.id.clone(),
                    psnr_db: psnr(&to_unit_range(&restored), &to_unit_range(x))?,
                    perceptual: perceptual_distance(&ext, &restored, x)?,
                    seed: sample_seed,
                };
                file.write_all(format!("{}\n", row.to_line()).as_bytes())?;
                file.flush()?;
                done.insert(commin_key);
                written += 1;
                eprintln!(
                    "evaluate[{} dB] restored {}/{}",
                    snr_label(snr),
                    img_idx + 1,
                    images.len()
                );
            }
        }
        println!(
            "evaluate: finished SNR {} dB ({}/{} settings)",
            snr_label(snr),
            snr_idx + 1,
            grid.len()
        );
    }
    println!("evaluate: wrote {written} new rows to {}", path.display());
    Ok(path)
}
