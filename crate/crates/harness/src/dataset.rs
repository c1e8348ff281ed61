//! Dataset loading: a folder of PNGs becomes `[-1, 1]` channel-major
//! tensors with a deterministic train/val/test split.

use crate::config::Config;
use crate::error::{HarnessError, Result};
use commin_core::rng::rng_from_seed;
use commin_core::TensorF32;
use rand::seq::SliceRandom;
use std::path::Path;

/// One named image in `[-1, 1]`, shaped `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct ImageItem {
    pub id: String,
    pub data: TensorF32,
}

/// The three splits, in split order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageItem>,
    pub val: Vec<ImageItem>,
    pub test: Vec<ImageItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_tensors(&self) -> Vec<TensorF32> {
        self.train.iter().map(|i| i.data.clone()).collect()
    }
}

/// Loads every PNG under the dataset root and splits 80/10/10 using the
/// configured split seed. Image order is the sorted file order, so the
/// split depends only on names and the seed.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let root = cfg.dataset_root();
    if !root.is_dir() {
        return Err(HarnessError::MissingArtifact(format!(
            "dataset directory {} (run the gen-dataset subcommand first)",
            root.display()
        )));
    }
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::MissingArtifact(format!(
            "no PNG images under {} (run the gen-dataset subcommand first)",
            root.display()
        )));
    }
    let mut items = Vec::with_capacity(paths.len());
    for p in &paths {
        items.push(load_image(cfg, p)?);
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = rng_from_seed(cfg.dataset.split_seed);
    order.shuffle(&mut rng);
    let n = items.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut dataset = Dataset { train: vec![], val: vec![], test: vec![] };
    let mut slots: Vec<Option<ImageItem>> = items.into_iter().map(Some).collect();
    for (pos, &idx) in order.iter().enumerate() {
        let item = slots[idx].take().expect("each index appears once");
        if pos < n_train {
            dataset.train.push(item);
        } else if pos < n_train + n_val {
            dataset.val.push(item);
        } else {
            dataset.test.push(item);
        }
    }
    Ok(dataset)
}

fn load_image(cfg: &Config, path: &Path) -> Result<ImageItem> {
    let d = &cfg.dataset;
    let img = image::open(path)
        .map_err(|e| HarnessError::Dataset(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (d.height, d.width) {
        return Err(HarnessError::Dataset(format!(
            "{}: expected {}x{}, found {h}x{w}",
            path.display(),
            d.height,
            d.width
        )));
    }
    let mut data = TensorF32::zeros(vec![d.channels, d.height, d.width]);
    match d.channels {
        1 => {
            let gray = img.to_luma8();
            for (x, y, px) in gray.enumerate_pixels() {
                data[[0, y as usize, x as usize]] = to_signed_unit(px.0[0]);
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[c, y as usize, x as usize]] = to_signed_unit(px.0[c]);
                }
            }
        }
        other => {
            return Err(HarnessError::Dataset(format!("unsupported channel count {other}")));
        }
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    Ok(ImageItem { id, data })
}

fn to_signed_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tiny_config(dir: &Path, count: usize) -> Config {
        let text = format!(
            r#"
[run]
seed = 1
[dataset]
path = "{}"
count = {count}
channels = 3
height = 16
width = 16
split_seed = 17
[jscc]
symbols = 4
base = 8
avg_power = 1.0
train_snr_lo_db = -5.0
train_snr_hi_db = 5.0
train = {{ steps = 10, batch = 2, lr = 1e-3 }}
[inn]
levels = 1
pairs = 1
hidden = 8
pair_count = 8
train = {{ steps = 10, batch = 2, lr = 1e-3 }}
[diffusion]
t_steps = 10
beta_start = 1e-4
beta_end = 0.02
base = 8
emb_dim = 16
train = {{ steps = 10, batch = 2, lr = 1e-3 }}
[extractor]
widths = [4, 8, 8]
train = {{ steps = 10, batch = 2, lr = 1e-3 }}
[guidance]
[evaluate]
snr_grid_db = [1.0]
test_images = 2
[output]
dir = "out"
"#,
            dir.display()
        );
        toml::from_str(&text).unwrap()
    }

    #[test]
    fn split_sizes_membership_and_range() {
        let _env = crate::env_lock();
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), 20);
        generate_dataset(&cfg, tmp.path()).unwrap();
        let ds = load_dataset(&cfg).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (16, 2, 2));
        for item in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert_eq!(item.data.shape(), &[3, 16, 16]);
            assert!(item.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        // Same seed, same membership.
        let again = load_dataset(&cfg).unwrap();
        let ids = |v: &[ImageItem]| v.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&ds.test), ids(&again.test));
        // Different seed moves images between splits.
        let mut other = cfg.clone();
        other.dataset.split_seed = 18;
        let moved = load_dataset(&other).unwrap();
        assert_ne!(ids(&ds.train), ids(&moved.train));
    }

    #[test]
    fn wrong_shape_is_an_itemized_error() {
        let _env = crate::env_lock();
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), 3);
        generate_dataset(&cfg, tmp.path()).unwrap();
        // One image of the wrong size sneaks in.
        let odd = image::RgbImage::new(8, 8);
        odd.save(tmp.path().join("img_9999.png")).unwrap();
        let err = load_dataset(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img_9999"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn missing_directory_is_a_missing_artifact() {
        let _env = crate::env_lock();
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&tmp.path().join("absent"), 3);
        let err = load_dataset(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn env_var_overrides_dataset_root() {
        let _env = crate::env_lock();
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&tmp.path().join("absent"), 4);
        let real = tmp.path().join("real");
        generate_dataset(&cfg, &real).unwrap();
        // Serialize access to the process environment.
        std::env::set_var(crate::config::DATASET_ROOT_ENV, &real);
        let loaded = load_dataset(&cfg);
        std::env::remove_var(crate::config::DATASET_ROOT_ENV);
        assert_eq!(loaded.unwrap().len(), 4);
    }
}
