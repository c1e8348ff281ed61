//! Aggregation of per-image results into per-(method, SNR) means, plus two
//! SVG line plots: distortion (PSNR, higher is better) and the perceptual
//! distance (lower is better) against channel SNR.

use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::experiment::{read_results, results_path, snr_label, ResultRow};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub snr_db: f64,
    pub mean_psnr: f64,
    pub mean_perceptual: f64,
    pub n: usize,
}

/// Groups rows by (method, SNR) and averages both metrics.
pub fn aggregate(rows: &[ResultRow]) -> Vec<ReportRow> {
    let mut cells: BTreeMap<(String, u64), (f64, f64, usize, f64)> = BTreeMap::new();
    for r in rows {
        // Total-order bits keep NaN-free floats sortable as map keys.
        let key = (r.method.clone(), ordered_bits(r.snr_db));
        let cell = cells.entry(key).or_insert((0.0, 0.0, 0, r.snr_db));
        cell.0 += r.psnr_db;
        cell.1 += r.perceptual;
        cell.2 += 1;
    }
    cells
        .into_iter()
        .map(|((method, _), (psnr_sum, perc_sum, n, snr_db))| ReportRow {
            method,
            snr_db,
            mean_psnr: psnr_sum / n as f64,
            mean_perceptual: perc_sum / n as f64,
            n,
        })
        .collect()
}

fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if v >= 0.0 {
        b ^ (1 << 63)
    } else {
        !b
    }
}

/// Reads the results table, writes `report.csv` and the two plots.
/// Returns the paths written.
pub fn cmd_report(cfg: &Config) -> Result<Vec<PathBuf>> {
    let src = results_path(cfg);
    if !src.is_file() {
        return Err(HarnessError::MissingArtifact(format!(
            "results table {} (run evaluate first)",
            src.display()
        )));
    }
    let rows = read_results(&src)?;
    if rows.is_empty() {
        return Err(HarnessError::MissingArtifact(format!(
            "results table {} has no rows (run evaluate first)",
            src.display()
        )));
    }
    let report = aggregate(&rows);
    let out_dir = cfg.output_dir();
    std::fs::create_dir_all(&out_dir)?;

    let csv_path = out_dir.join("report.csv");
    let mut text = format!("# config {}\nmethod,snr_db,mean_psnr,mean_perceptual,n\n", cfg.config_hash());
    for r in &report {
        text.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.method,
            snr_label(r.snr_db),
            r.mean_psnr,
            r.mean_perceptual,
            r.n
        ));
    }
    std::fs::write(&csv_path, text)?;

    let series_for = |metric: fn(&ReportRow) -> f64| -> Vec<Series> {
        let mut methods: Vec<String> = report.iter().map(|r| r.method.clone()).collect();
        methods.sort();
        methods.dedup();
        methods
            .into_iter()
            .map(|m| {
                let mut points: Vec<(f64, f64)> = report
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| (r.snr_db, metric(r)))
                    .collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                let color = if m == "commin" { "#d62728" } else { "#1f77b4" };
                Series { name: m, color: color.into(), points }
            })
            .collect()
    };

    let psnr_path = out_dir.join("psnr_vs_snr.svg");
    std::fs::write(
        &psnr_path,
        svg_line_plot(
            "Distortion vs channel quality (higher is better)",
            "channel SNR (dB)",
            "mean PSNR (dB)",
            &series_for(|r| r.mean_psnr),
        ),
    )?;
    let perc_path = out_dir.join("perceptual_vs_snr.svg");
    std::fs::write(
        &perc_path,
        svg_line_plot(
            "Perceptual distance vs channel quality (lower is better)",
            "channel SNR (dB)",
            "mean perceptual distance",
            &series_for(|r| r.mean_perceptual),
        ),
    )?;
    println!(
        "report: wrote {}, {}, {}",
        csv_path.display(),
        psnr_path.display(),
        perc_path.display()
    );
    Ok(vec![csv_path, psnr_path, perc_path])
}

pub struct Series {
    pub name: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal deterministic SVG line chart; no external assets.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 26.0, 46.0, 56.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = min_max(all.iter().map(|p| p.0));
    let (mut y0, mut y1) = min_max(all.iter().map(|p| p.1));
    if x0 == x1 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y0 == y1 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = (y1 - y0) * 0.08;
    y0 -= pad;
    y1 += pad;
    let sx = move |v: f64| ml + (v - x0) / (x1 - x0) * pw;
    let sy = move |v: f64| mt + ph - (v - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        ml + pw / 2.0
    ));

    // Axes.
    out.push_str(&format!(
        "<line x1=\"{ml:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    out.push_str(&format!(
        "<line x1=\"{ml:.2}\" y1=\"{mt:.2}\" x2=\"{ml:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + ph
    ));

    // X ticks at the union of plotted x positions.
    let mut xt: Vec<f64> = all.iter().map(|p| p.0).collect();
    xt.sort_by(f64::total_cmp);
    xt.dedup();
    for v in &xt {
        let x = sx(*v);
        out.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            mt + ph,
            mt + ph + 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n",
            mt + ph + 20.0,
            snr_label(*v)
        ));
    }

    // Five evenly spaced y ticks.
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{ml:.2}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"12\">{v:.2}</text>\n",
            ml - 9.0,
            y + 4.0
        ));
    }

    // Axis labels.
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\">{x_label}</text>\n",
        ml + pw / 2.0,
        h - 14.0
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {:.2})\">{y_label}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    ));

    // Series lines, markers, legend.
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            pts.join(" "),
            s.color
        ));
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n",
                sx(x),
                sy(y),
                s.color
            ));
        }
        let ly = mt + 10.0 + i as f64 * 18.0;
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            ml + pw - 110.0,
            ml + pw - 86.0,
            s.color
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
            ml + pw - 80.0,
            ly + 4.0,
            s.name
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo.is_finite() && hi.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, snr: f64, psnr: f64, perc: f64) -> ResultRow {
        ResultRow {
            method: method.into(),
            snr_db: snr,
            rho: 0.0013021,
            image_id: "img".into(),
            psnr_db: psnr,
            perceptual: perc,
            seed: 0,
        }
    }

    #[test]
    fn aggregation_means_and_grouping() {
        let rows = vec![
            row("deepjscc", -5.0, 10.0, 0.5),
            row("deepjscc", -5.0, 14.0, 0.3),
            row("commin", -5.0, 11.0, 0.2),
            row("deepjscc", 1.0, 20.0, 0.1),
        ];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 3);
        let d5 = agg.iter().find(|r| r.method == "deepjscc" && r.snr_db == -5.0).unwrap();
        assert_eq!(d5.n, 2);
        assert!((d5.mean_psnr - 12.0).abs() < 1e-12);
        assert!((d5.mean_perceptual - 0.4).abs() < 1e-12);
        // Negative SNRs sort below positive ones.
        let snrs: Vec<f64> =
            agg.iter().filter(|r| r.method == "deepjscc").map(|r| r.snr_db).collect();
        assert_eq!(snrs, vec![-5.0, 1.0]);
    }

    #[test]
    fn svg_plot_contains_series_and_is_deterministic() {
        let series = vec![
            Series { name: "deepjscc".into(), color: "#1f77b4".into(), points: vec![(-5.0, 10.0), (1.0, 15.0)] },
            Series { name: "commin".into(), color: "#d62728".into(), points: vec![(-5.0, 9.5), (1.0, 14.8)] },
        ];
        let a = svg_line_plot("t", "x", "y", &series);
        let b = svg_line_plot("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.contains("polyline"));
        assert!(a.contains("commin") && a.contains("deepjscc"));
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
    }
}
