//! Text tables and static SVG plots for report files.

use std::fmt::Write;

use dimaf_core::explain::BaselineKind;
use dimaf_core::train_eval::{AnyReport, CrossvalReport, ExplainReport, Stat};

fn pm(values: &[f64], scale: f64) -> String {
    let s = Stat::of(values);
    format!("{:.4} ± {:.4}", s.mean * scale, s.std * scale)
}

fn pm_pct(values: &[f64]) -> String {
    let s = Stat::of(values);
    format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std)
}

fn table(out: &mut String, title: &str, header: &[&str], rows: &[Vec<String>]) {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    writeln!(out, "{title}").unwrap();
    writeln!(out, "{}", line(header.to_vec())).unwrap();
    writeln!(out, "{}", width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")).unwrap();
    for r in rows {
        writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
    }
    out.push('\n');
}

/// Summary statistics are recomputed from the per-fold values rather than
/// read from the stored summary.
pub fn render_tables(reports: &[AnyReport]) -> String {
    let crossval: Vec<&CrossvalReport> = reports
        .iter()
        .filter_map(|r| match r {
            AnyReport::Crossval(c) => Some(c),
            _ => None,
        })
        .collect();
    let explain: Vec<&ExplainReport> = reports
        .iter()
        .filter_map(|r| match r {
            AnyReport::Explain(e) => Some(e),
            _ => None,
        })
        .collect();
    let mut out = String::new();
    if !crossval.is_empty() {
        let mut rows: Vec<Vec<String>> = crossval
            .iter()
            .map(|r| {
                let c: Vec<f64> = r.folds.iter().map(|f| f.c_index).collect();
                vec![r.variant.clone(), r.seed.to_string(), r.folds.len().to_string(), pm(&c, 1.0)]
            })
            .collect();
        if let Some(r) = crossval.iter().find(|r| r.folds.iter().all(|f| f.clinical_c_index.is_some())) {
            let c: Vec<f64> = r.folds.iter().filter_map(|f| f.clinical_c_index).collect();
            rows.push(vec!["Clinical Cox".into(), r.seed.to_string(), r.folds.len().to_string(), pm(&c, 1.0)]);
        }
        table(&mut out, "Test c-index (mean ± std over folds)", &["model", "seed", "folds", "c-index"], &rows);

        let rows: Vec<Vec<String>> = crossval
            .iter()
            .map(|r| {
                let col = |f: fn(&dimaf_core::train_eval::FoldRecord) -> f64| pm(&r.folds.iter().map(f).collect::<Vec<_>>(), 1.0);
                vec![
                    r.variant.clone(),
                    format!("{}", r.lambda_dis),
                    col(|f| f.d1),
                    col(|f| f.d2),
                    col(|f| f.dc_total),
                ]
            })
            .collect();
        table(
            &mut out,
            "Test-set distance correlation (mean ± std over folds)",
            &["model", "lambda_dis", "D1 specific", "D2 spec/shared", "total"],
            &rows,
        );
    }
    if !explain.is_empty() {
        let rows: Vec<Vec<String>> = explain
            .iter()
            .map(|r| {
                let col = |f: &dyn Fn(&dimaf_core::explain::Shares) -> f64| {
                    pm_pct(&r.folds.iter().map(|x| f(&x.shares)).collect::<Vec<_>>())
                };
                vec![
                    r.variant.clone(),
                    col(&|s| s.blocks[0]),
                    col(&|s| s.blocks[1]),
                    col(&|s| s.blocks[2]),
                    col(&|s| s.blocks[3]),
                    col(&|s| s.specific),
                    col(&|s| s.shared),
                ]
            })
            .collect();
        table(
            &mut out,
            "Normalized attribution shares, % (mean ± std over folds)",
            &["model", "gg", "hh", "hg", "gh", "specific", "shared"],
            &rows,
        );
        for r in &explain {
            let baseline = match r.baseline {
                BaselineKind::TrainMean => "training-fold mean",
                BaselineKind::Zero => "zero",
            };
            writeln!(out, "{} shares: {}; baseline {baseline}; {} patient(s) excluded", r.variant, r.recipe, r.n_excluded).unwrap();
        }
    }
    out
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart of `(label, points)` series.
pub fn line_plot(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), top + ph + 16.0, tick(xv)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, sy(yv) + 4.0, tick(yv)).unwrap();
        writeln!(s, r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, left + pw, sy(yv), sy(yv)).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(x_label)).unwrap();
    for (i, (label, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" ")).unwrap();
        let ly = top + 14.0 + 18.0 * i as f64;
        writeln!(s, r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 36.0, ly + 4.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Per-epoch means over folds of a history column.
fn epoch_curve(r: &CrossvalReport, f: fn(&dimaf_core::train_eval::EpochStats) -> f64) -> Vec<(f64, f64)> {
    let n = r.folds.iter().map(|f| f.history.len()).min().unwrap_or(0);
    (0..n)
        .map(|e| {
            let vals: Vec<f64> = r.folds.iter().map(|fold| f(&fold.history[e])).collect();
            (r.folds[0].history[e].epoch as f64, Stat::of(&vals).mean)
        })
        .collect()
}

/// `(file name, svg)` pairs: loss curves and training-batch DC per epoch for
/// every cross-validation report.
pub fn render_plots(reports: &[AnyReport]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let AnyReport::Crossval(r) = r else { continue };
        let stem = format!("{i}_{}", r.variant.to_lowercase());
        let loss = vec![
            ("total".to_string(), epoch_curve(r, |s| s.total)),
            ("survival".to_string(), epoch_curve(r, |s| s.surv)),
            ("disentanglement".to_string(), epoch_curve(r, |s| s.dis)),
        ];
        out.push((format!("{stem}_loss.svg"), line_plot(&format!("{} training loss", r.variant), "epoch", &loss)));
        let dc = vec![
            ("D1".to_string(), epoch_curve(r, |s| s.d1)),
            ("D2".to_string(), epoch_curve(r, |s| s.d2)),
        ];
        out.push((format!("{stem}_dc.svg"), line_plot(&format!("{} distance correlation", r.variant), "epoch", &dc)));
    }
    out
}
