//! Acceptance gate: one ordered run over every shipped guarantee, printing
//! a pass/fail line per criterion and failing the test if any line fails.
//!
//! Criteria 1-7 are self-contained property checks (seconds to minutes).
//! Criterion 8 trains or reuses the desk profile's artifacts under
//! `runs/desk32` (tens of minutes when training from scratch). Criterion 9
//! is the long pole: guided restoration at T = 1000 over three channel
//! settings x 50 test images (one to two hours); its result rows are
//! appended to `runs/desk32/results.csv`, so an interrupted run resumes
//! where it stopped. Criterion 10 replays a two-image evaluation twice and
//! compares bytes.
//!
//! Stream the lines with
//! `cargo test -p commin-harness --test acceptance -- --nocapture`.

use commin_core::channel::{add_awgn, noise_sigma_sq, pack_complex, power_normalize_codeword};
use commin_core::diffusion::{sample, Denoiser, DenoiserArch, GuidanceHook, NoiseSchedule};
use commin_core::guided::{commin_sample, guidance_gradient, CommInGuidance, GuidanceConfig};
use commin_core::inn::{coarse_target, Inn, InnArch};
use commin_core::jscc::{Jscc, JsccArch};
use commin_core::nn::ParamSet;
use commin_core::rng::{normal_array, rng_from_seed};
use commin_core::tensor::{Session, Tape};
use commin_harness::config::Config;
use commin_harness::dataset::load_dataset;
use commin_harness::experiment::{
    self, denoiser_path, extractor_path, inn_path, jscc_path, pairs_path, read_results,
    read_train_summary, results_path,
};
use commin_harness::synth;
use ndarray::ArrayD;
use std::path::{Path, PathBuf};

type Check = Result<String, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().unwrap().parent().unwrap().to_path_buf()
}

fn desk_config() -> Config {
    Config::load(&workspace_root().join("configs/desk32.toml")).expect("desk profile parses")
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// 1. Every encoding satisfies the average power constraint exactly.
fn c1_power_constraint() -> Check {
    let mut rng = rng_from_seed(101);
    let jscc: Jscc<f64> = Jscc::new(
        "jscc",
        &mut rng,
        JsccArch {
            channels: 3,
            height: 32,
            width: 32,
            symbols: 4,
            base: 12,
            avg_power: 1.0,
        },
    )
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x: ArrayD<f64> = normal_array(&mut rng, &[3, 32, 32]);
        let z = jscc.encode_values(&x).map_err(|e| e.to_string())?;
        let power = z.iter().map(|v| v * v).sum::<f64>() / 4.0;
        worst = worst.max(rel_err(power, 1.0));
    }
    if worst < 1e-9 {
        Ok(format!("worst relative power error {worst:.2e} over 1000 encodings"))
    } else {
        Err(format!("relative power error reached {worst:.2e} (allowed 1e-9)"))
    }
}

/// 2. The channel's empirical SNR matches the nominal setting.
fn c2_channel_snr() -> Check {
    let mut rng = rng_from_seed(202);
    let mut worst = 0.0f64;
    for snr_db in [-5.0, -3.0, -1.0, 1.0, 3.0, 5.0] {
        let sigma_sq = noise_sigma_sq(1.0, snr_db).map_err(|e| e.to_string())?;
        let clean: ArrayD<f64> = normal_array(&mut rng, &[2_000_000]);
        let clean = power_normalize_codeword(&clean, 1.0).map_err(|e| e.to_string())?;
        let mut symbols =
            pack_complex(clean.as_slice().unwrap()).map_err(|e| e.to_string())?;
        let sent = symbols.clone();
        add_awgn(&mut symbols, sigma_sq, &mut rng).map_err(|e| e.to_string())?;
        let noise_power = symbols
            .iter()
            .zip(&sent)
            .map(|(r, s)| (r - s).norm_sqr())
            .sum::<f64>()
            / sent.len() as f64;
        let empirical_db = 10.0 * (1.0 / noise_power).log10();
        worst = worst.max((empirical_db - snr_db).abs());
    }
    if worst <= 0.05 {
        Ok(format!("worst empirical deviation {worst:.4} dB over 1e6 symbols per setting"))
    } else {
        Err(format!("empirical SNR off by {worst:.4} dB (allowed 0.05)"))
    }
}

fn randomized_inn(rng: &mut impl rand::Rng, levels: usize) -> Inn<f32> {
    let mut inn: Inn<f32> =
        Inn::new("inn", rng, InnArch { channels: 3, levels, pairs: 2, hidden: 8 });
    let mut seeds = rng_from_seed(rng.random());
    inn.visit_mut(&mut |p| {
        let fresh: ArrayD<f32> = normal_array(&mut seeds, p.value().shape());
        p.set(fresh.mapv(|v| v * 0.3));
    });
    inn
}

/// 3. Decomposing and recomposing recovers the image, trained or not.
fn c3_inn_roundtrip(cfg: &Config, trained: Option<&Inn<f32>>) -> Check {
    let mut rng = rng_from_seed(303);
    let rand1 = randomized_inn(&mut rng, 1);
    let rand2 = randomized_inn(&mut rng, 2);
    let mut nets: Vec<(&str, &Inn<f32>)> =
        vec![("random L1", &rand1), ("random L2", &rand2)];
    if let Some(t) = trained {
        nets.push(("trained L1", t));
    }
    let trained_note = if trained.is_some() {
        "random + trained parameters"
    } else {
        "random parameters (trained network not on disk yet; covered after criterion 8)"
    };
    let _ = cfg;
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let x: ArrayD<f32> = normal_array(&mut rng, &[3, 32, 32]);
        for (label, inn) in &nets {
            let (c, d) = inn.forward_values(&x).map_err(|e| format!("{label}: {e}"))?;
            let back = inn.invert_values(&c, &d).map_err(|e| format!("{label}: {e}"))?;
            let err = back
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            worst = worst.max(err);
        }
    }
    if worst < 1e-4 {
        Ok(format!("max roundtrip error {worst:.2e} over 100 images, L in {{1,2}}, {trained_note}"))
    } else {
        Err(format!("roundtrip error reached {worst:.2e} (allowed 1e-4)"))
    }
}

/// Plain squeeze-and-split written directly from index arithmetic, kept
/// deliberately independent of the network's own implementation.
fn oracle_squeeze_split(x: &ArrayD<f32>, levels: usize) -> (ArrayD<f32>, Vec<ArrayD<f32>>) {
    let mut coarse = x.clone();
    let mut details = Vec::new();
    for _ in 0..levels {
        let sh = coarse.shape().to_vec();
        let (ch, h, w) = (sh[0], sh[1], sh[2]);
        let mut squeezed = ArrayD::zeros(vec![4 * ch, h / 2, w / 2]);
        for c in 0..ch {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    // Quadrant q maps to channel block q*ch + c.
                    for (q, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        squeezed[[q * ch + c, i, j]] = coarse[[c, 2 * i + di, 2 * j + dj]];
                    }
                }
            }
        }
        let next = squeezed.slice(ndarray::s![..ch, .., ..]).to_owned().into_dyn();
        let detail = squeezed.slice(ndarray::s![ch.., .., ..]).to_owned().into_dyn();
        details.push(detail);
        coarse = next;
    }
    details.reverse();
    (coarse, details)
}

/// 4. A zero-parameter network equals the independent squeeze-split oracle.
fn c4_zero_param_oracle() -> Check {
    let mut rng = rng_from_seed(404);
    let mut worst = 0.0f32;
    for levels in [1usize, 2] {
        for dim in [8usize, 32] {
            let inn: Inn<f32> = Inn::new(
                "inn",
                &mut rng,
                InnArch { channels: 3, levels, pairs: 2, hidden: 8 },
            );
            for _ in 0..20 {
                let x: ArrayD<f32> = normal_array(&mut rng, &[3, dim, dim]);
                let (c, d) = inn.forward_values(&x).map_err(|e| e.to_string())?;
                let (oc, od) = oracle_squeeze_split(&x, levels);
                if c.shape() != oc.shape() || d.len() != od.len() {
                    return Err(format!(
                        "decomposition shape mismatch at L={levels}, {dim}x{dim}"
                    ));
                }
                let err_c =
                    c.iter().zip(oc.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
                worst = worst.max(err_c);
                for (db, ob) in d.iter().zip(od.iter()) {
                    let e = db
                        .iter()
                        .zip(ob.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f32, f32::max);
                    worst = worst.max(e);
                }
            }
        }
    }
    if worst < 1e-6 {
        Ok(format!("max deviation from the squeeze-split oracle {worst:.2e}"))
    } else {
        Err(format!("zero-parameter network deviates by {worst:.2e} (allowed 1e-6)"))
    }
}

/// 5. Clean-estimate and posterior-step algebra, including hand values.
fn c5_step_algebra() -> Check {
    // Recovering x0 from its own noising is exact for any (t, eps).
    let sched = NoiseSchedule::linear(50, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(505);
    let x0: ArrayD<f64> = normal_array(&mut rng, &[3, 8, 8]);
    let mut worst = 0.0f64;
    for t in [1usize, 25, 50] {
        let eps: ArrayD<f64> = normal_array(&mut rng, &[3, 8, 8]);
        let xt = sched.q_sample(&x0, t, &eps).map_err(|e| e.to_string())?;
        let back = sched.predict_x0(&xt, t, &eps).map_err(|e| e.to_string())?;
        let err =
            back.iter().zip(x0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        worst = worst.max(err);
    }
    if worst >= 1e-6 {
        return Err(format!("noising inversion error {worst:.2e} (allowed 1e-6)"));
    }

    // Single-step schedule with beta = 0.75 gives alpha_bar = 1/4:
    // (1 - sqrt(3/4) * 0.5) / sqrt(1/4) = 1.1339746.
    let one = NoiseSchedule::linear(1, 0.75, 0.75).map_err(|e| e.to_string())?;
    let xt = ArrayD::from_elem(vec![2, 2], 1.0f64);
    let eps = ArrayD::from_elem(vec![2, 2], 0.5f64);
    let x0h = one.predict_x0(&xt, 1, &eps).map_err(|e| e.to_string())?;
    let hand1 = 1.1339746f64;
    if x0h.iter().any(|v| (v - hand1).abs() >= 1e-6) {
        return Err(format!("clean-estimate hand value {} != {hand1}", x0h[[0, 0]]));
    }

    // Two-step schedule with betas {0.1, 0.01}: alpha_2 = 0.99 and
    // alpha_bar_1 = 0.9, so the deterministic posterior step applied to
    // x_t = x0 = 1 lands on 0.9998675.
    let two = NoiseSchedule::linear(2, 0.1, 0.01).map_err(|e| e.to_string())?;
    let ones = ArrayD::from_elem(vec![2, 2], 1.0f64);
    let zeros = ArrayD::zeros(vec![2, 2]);
    let stepped = two.posterior_step(&ones, &ones, 2, &zeros).map_err(|e| e.to_string())?;
    let hand2 = 0.9998675f64;
    if stepped.iter().any(|v| (v - hand2).abs() >= 1e-6) {
        return Err(format!("posterior-step hand value {} != {hand2}", stepped[[0, 0]]));
    }
    Ok(format!(
        "inversion error {worst:.2e}; hand values {hand1} and {hand2} reproduced to 1e-6"
    ))
}

/// 6. The analytic guidance gradient agrees with central finite differences.
fn c6_guidance_gradient_fd() -> Check {
    let mut rng = rng_from_seed(606);
    let den: Denoiser<f64> =
        Denoiser::new("den", &mut rng, DenoiserArch { channels: 1, base: 6, emb_dim: 12 });
    let mut inn: Inn<f64> =
        Inn::new("inn", &mut rng, InnArch { channels: 1, levels: 1, pairs: 1, hidden: 4 });
    let mut seeds = rng_from_seed(6161);
    inn.visit_mut(&mut |p| {
        let fresh: ArrayD<f64> = normal_array(&mut seeds, p.value().shape());
        p.set(fresh.mapv(|v| v * 0.2));
    });
    let sched = NoiseSchedule::linear(20, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let y: ArrayD<f64> = normal_array(&mut rng, &[1, 8, 8]);
    let config = GuidanceConfig::with_zeta(0.7).map_err(|e| e.to_string())?;

    let residual_at = |x: &ArrayD<f64>, t: usize, range: Option<(f64, f64)>| -> f64 {
        let hook = CommInGuidance::new(&inn, &y, &config).unwrap();
        let tape = Tape::new();
        let sess = Session::new(&tape, false);
        let xt = sess.constant(x.clone());
        let eps = den.forward(&sess, xt, t);
        let mut x0t = sched.predict_x0_var(xt, eps, t);
        if let Some((lo, hi)) = range {
            x0t = x0t.clamp(lo, hi);
        }
        let r = hook.residual(&sess, xt, x0t).unwrap();
        *r.value().iter().next().unwrap()
    };

    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for range in [None, Some((-1.0, 1.0))] {
        for t in [2usize, 10, 19] {
            let x: ArrayD<f64> = normal_array(&mut rng, &[1, 8, 8]);
            let grad = guidance_gradient(&x, t, &y, &den, &inn, &sched, &config, range)
                .map_err(|e| e.to_string())?;
            let h = 1e-5;
            for k in 0..12 {
                let flat = (k * 5 + t) % x.len();
                let mut xp = x.clone();
                let mut xm = x.clone();
                {
                    let sp = xp.as_slice_mut().unwrap();
                    sp[flat] += h;
                }
                {
                    let sm = xm.as_slice_mut().unwrap();
                    sm[flat] -= h;
                }
                let fd = (residual_at(&xp, t, range) - residual_at(&xm, t, range)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[flat];
                if fd.abs() < 1e-9 && an.abs() < 1e-9 {
                    checked += 1;
                    continue;
                }
                let rel = (fd - an).abs() / an.abs().max(fd.abs());
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    if worst < 1e-3 {
        Ok(format!(
            "worst relative error {worst:.2e} over {checked} coordinates, 3 timesteps, \
             projected and unprojected"
        ))
    } else {
        Err(format!("finite-difference mismatch {worst:.2e} (allowed 1e-3)"))
    }
}

/// 7. Zero step size reproduces the unconditional sampler bit for bit.
fn c7_zero_zeta_reduction() -> Check {
    let mut rng = rng_from_seed(707);
    let den: Denoiser<f32> =
        Denoiser::new("den", &mut rng, DenoiserArch { channels: 3, base: 8, emb_dim: 16 });
    let inn: Inn<f32> =
        Inn::new("inn", &mut rng, InnArch { channels: 3, levels: 1, pairs: 2, hidden: 8 });
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let y: ArrayD<f32> = normal_array(&mut rng, &[3, 16, 16]);
    let range = Some((-1.0f32, 1.0f32));

    let config = GuidanceConfig::with_zeta(0.0).map_err(|e| e.to_string())?;
    let guided = commin_sample(&y, &den, &inn, &sched, &config, &mut rng_from_seed(7070), range)
        .map_err(|e| e.to_string())?;
    let plain = sample(&den, &sched, y.shape(), &mut rng_from_seed(7070), None, range)
        .map_err(|e| e.to_string())?;
    if guided != plain {
        return Err("zero step size diverged from the unconditional sampler".into());
    }

    // The hook path must consume randomness identically even when active.
    let hook = CommInGuidance::new(&inn, &y, &config).map_err(|e| e.to_string())?;
    let hooked = sample(&den, &sched, y.shape(), &mut rng_from_seed(7070), Some(&hook), range)
        .map_err(|e| e.to_string())?;
    if hooked != plain {
        return Err("hook with zero step size changed the trajectory".into());
    }
    Ok("bit-identical trajectories over 200 steps, direct and hooked".into())
}

fn ensure_artifacts(cfg: &Config) -> Result<(), String> {
    if load_dataset(cfg).is_err() {
        synth::generate_dataset(cfg, &cfg.dataset_root()).map_err(|e| e.to_string())?;
    }
    if !jscc_path(cfg).is_file() {
        experiment::cmd_train_jscc(cfg).map_err(|e| e.to_string())?;
    }
    if !denoiser_path(cfg).is_file() {
        experiment::cmd_train_diffusion(cfg).map_err(|e| e.to_string())?;
    }
    if !extractor_path(cfg).is_file() {
        experiment::cmd_train_extractor(cfg).map_err(|e| e.to_string())?;
    }
    for &snr in &cfg.evaluate.snr_grid_db {
        if !inn_path(cfg, snr).is_file() {
            if !pairs_path(cfg, snr).is_file() {
                experiment::cmd_gen_pairs(cfg, &[snr]).map_err(|e| e.to_string())?;
            }
            experiment::cmd_train_inn(cfg, &[snr]).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

/// 8. Desk-scale training moves every loss well below its start.
fn c8_training_sanity(cfg: &Config) -> Check {
    ensure_artifacts(cfg)?;
    let jscc = read_train_summary(&jscc_path(cfg)).map_err(|e| e.to_string())?;
    let diff = read_train_summary(&denoiser_path(cfg)).map_err(|e| e.to_string())?;
    let jscc_ratio = jscc.last / jscc.initial.max(1e-12);
    let diff_ratio = diff.last / diff.initial.max(1e-12);
    let mut inn_worst = 0.0f64;
    for &snr in &cfg.evaluate.snr_grid_db {
        let s = read_train_summary(&inn_path(cfg, snr)).map_err(|e| e.to_string())?;
        inn_worst = inn_worst.max(s.last / s.initial.max(1e-12));
    }
    let detail = format!(
        "loss ratios: jscc {jscc_ratio:.3} (<=0.7), inn worst {inn_worst:.3} (<=0.5), \
         diffusion {diff_ratio:.3} (<=0.6)"
    );
    if jscc_ratio <= 0.7 && inn_worst <= 0.5 && diff_ratio <= 0.6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 9. Restoration wins the perceptual comparison without losing fidelity.
fn c9_restoration_trend(cfg: &Config) -> Check {
    let mut eval_cfg = cfg.clone();
    eval_cfg.evaluate.snr_grid_db = vec![-5.0, 1.0, 5.0];
    let path = experiment::cmd_evaluate(&eval_cfg).map_err(|e| e.to_string())?;
    let rows = read_results(&path).map_err(|e| e.to_string())?;

    let mut lines = Vec::new();
    let mut all_pass = true;
    for snr in [-5.0, 1.0, 5.0] {
        let of = |method: &str| {
            let mut m: Vec<_> = rows
                .iter()
                .filter(|r| r.method == method && r.snr_db == snr)
                .collect();
            m.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            m
        };
        let base = of("deepjscc");
        let ours = of("commin");
        if base.len() != ours.len() || base.is_empty() {
            return Err(format!(
                "row mismatch at {snr} dB: {} baseline vs {} restored",
                base.len(),
                ours.len()
            ));
        }
        let n = base.len();
        let mut wins = 0usize;
        let mut psnr_base = 0.0f64;
        let mut psnr_ours = 0.0f64;
        for (b, o) in base.iter().zip(&ours) {
            if b.image_id != o.image_id {
                return Err(format!("unpaired image ids {} vs {}", b.image_id, o.image_id));
            }
            if o.perceptual < b.perceptual {
                wins += 1;
            }
            psnr_base += b.psnr_db;
            psnr_ours += o.psnr_db;
        }
        psnr_base /= n as f64;
        psnr_ours /= n as f64;
        let win_frac = wins as f64 / n as f64;
        let psnr_drop = psnr_base - psnr_ours;
        let ok = win_frac >= 0.6 && psnr_drop <= 1.5;
        all_pass &= ok;
        lines.push(format!(
            "{snr} dB: perceptual wins {wins}/{n} ({:.0}%), mean PSNR {psnr_ours:.2} vs \
             {psnr_base:.2} (drop {psnr_drop:+.2} dB){}",
            win_frac * 100.0,
            if ok { "" } else { " <- FAIL" }
        ));
    }
    let detail = lines.join("; ");
    if all_pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 10. Two identically configured evaluations emit identical bytes.
fn c10_reproducibility(cfg: &Config) -> Check {
    let mut small = cfg.clone();
    small.evaluate.snr_grid_db = vec![1.0];
    small.evaluate.test_images = 2;
    let main = results_path(&small);
    let parked = main.with_extension("csv.parked");
    if main.is_file() {
        std::fs::rename(&main, &parked).map_err(|e| e.to_string())?;
    }
    let run = || -> Result<Vec<u8>, String> {
        let p = experiment::cmd_evaluate(&small).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
        std::fs::remove_file(&p).map_err(|e| e.to_string())?;
        Ok(bytes)
    };
    let first = run();
    let second = run();
    // Always restore the parked sweep before judging the outcome.
    if parked.is_file() {
        std::fs::rename(&parked, &main).map_err(|e| e.to_string())?;
    }
    let (first, second) = (first?, second?);
    if first == second {
        Ok(format!("two runs, {} identical bytes", first.len()))
    } else {
        Err("replayed evaluation produced different bytes".into())
    }
}

#[test]
fn acceptance_criteria() {
    std::env::set_current_dir(workspace_root()).expect("workspace root exists");
    let cfg = desk_config();

    let mut outcomes: Vec<(usize, &str, Check)> = Vec::new();
    let mut record = |n: usize, name: &'static str, result: Check| {
        match &result {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(detail) => println!("criterion {n} ({name}): FAIL - {detail}"),
        }
        outcomes.push((n, name, result));
    };

    record(1, "encoder power constraint", c1_power_constraint());
    record(2, "channel SNR calibration", c2_channel_snr());
    // The trained network joins criterion 3 when a prior run left it on
    // disk; criterion 8 trains it otherwise, and the roundtrip is
    // parameter-independent by construction either way.
    let trained_inn = experiment::load_inn(&cfg, 1.0).ok();
    record(3, "lifting network roundtrip", c3_inn_roundtrip(&cfg, trained_inn.as_ref()));
    record(4, "zero-parameter oracle", c4_zero_param_oracle());
    record(5, "sampler step algebra", c5_step_algebra());
    record(6, "guidance gradient vs finite differences", c6_guidance_gradient_fd());
    record(7, "zero step-size reduction", c7_zero_zeta_reduction());
    record(8, "training sanity", c8_training_sanity(&cfg));
    if trained_inn.is_none() {
        let now_trained = experiment::load_inn(&cfg, 1.0).ok();
        record(3, "lifting network roundtrip (trained)", c3_inn_roundtrip(&cfg, now_trained.as_ref()));
    }
    record(9, "restoration trend", c9_restoration_trend(&cfg));
    record(10, "evaluation reproducibility", c10_reproducibility(&cfg));

    let failures: Vec<String> = outcomes
        .iter()
        .filter_map(|(n, name, r)| r.as_ref().err().map(|e| format!("criterion {n} ({name}): {e}")))
        .collect();
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
