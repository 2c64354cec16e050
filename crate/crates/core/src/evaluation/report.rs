//! Sweep report emission: CSV, plain-text tables, and SVG plots.

use super::SweepRecord;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const CSV_HEADER: &str =
    "lambda,dice_mean,dice_sd,dice30,fold_pct_mean,fold_pct_sd,sdlog_j,mean_abs_v";

/// Write sweep records as CSV. Floats use shortest round-trip formatting, so
/// reparsing restores the exact in-memory values.
pub fn write_sweep_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.lambda,
            r.dice_mean,
            r.dice_sd,
            r.dice30,
            r.fold_pct_mean,
            r.fold_pct_sd,
            r.sdlog_j,
            r.mean_abs_v
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::format(
            "header",
            format!("expected `{CSV_HEADER}`, found `{header}`"),
        ));
    }
    let mut records = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(Error::format(
                "row",
                format!("expected 8 columns, found {}", cells.len()),
            ));
        }
        let f = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::format("row", e.to_string()))
        };
        records.push(SweepRecord {
            lambda: f(0)?,
            dice_mean: f(1)?,
            dice_sd: f(2)?,
            dice30: f(3)?,
            fold_pct_mean: f(4)?,
            fold_pct_sd: f(5)?,
            sdlog_j: f(6)?,
            mean_abs_v: f(7)?,
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("sweep CSV has no rows".into()));
    }
    Ok(records)
}

/// One summary row for the cross-method table.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub opt_lambda: f64,
    pub dice: f64,
    pub dice_sd: f64,
    pub dice30: f64,
    pub fold_pct: f64,
    pub fold_sd: f64,
    pub sdlog_j: f64,
    pub budget_violated: bool,
}

/// Render the cross-method summary table. Column order:
/// Method, Opt. lambda, Dice, Dice30, % Folds, sdlog|J|.
pub fn render_summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>9} {:>15} {:>7} {:>15} {:>9}\n",
        "Method", "Opt. λ", "Dice", "Dice30", "% Folds", "sdlog|J|"
    ));
    for r in rows {
        let flag = if r.budget_violated { " *" } else { "" };
        out.push_str(&format!(
            "{:<18} {:>9.3} {:>7.3} ± {:>5.3} {:>7.3} {:>7.3} ± {:>5.3} {:>9.3}{}\n",
            r.method, r.opt_lambda, r.dice, r.dice_sd, r.dice30, r.fold_pct, r.fold_sd, r.sdlog_j, flag
        ));
    }
    if rows.iter().any(|r| r.budget_violated) {
        out.push_str("* no sweep row satisfied the folding budget\n");
    }
    out
}

/// Emit the full report for one method sweep: CSV, text table of all rows,
/// and SVG plots (Dice, fold %, sdlog|J| against lambda, plus Dice against
/// iteration when a training curve is supplied).
pub fn emit_report(
    records: &[SweepRecord],
    out_dir: &Path,
    dice_vs_iteration: Option<&[(u64, f64)]>,
) -> Result<Vec<std::path::PathBuf>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no sweep records to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let csv_path = out_dir.join("sweep.csv");
    write_sweep_csv(records, &csv_path)?;
    written.push(csv_path);

    let mut table = format!(
        "{:>7} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10}\n",
        "lambda", "dice", "dice_sd", "dice30", "fold_%", "sdlog|J|", "mean|v|"
    );
    for r in records {
        table.push_str(&format!(
            "{:>7.3} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>10.4}\n",
            r.lambda, r.dice_mean, r.dice_sd, r.dice30, r.fold_pct_mean, r.sdlog_j, r.mean_abs_v
        ));
    }
    let table_path = out_dir.join("sweep.txt");
    fs::write(&table_path, table)?;
    written.push(table_path);

    let lambdas: Vec<f64> = records.iter().map(|r| r.lambda).collect();
    let plots: [(&str, &str, Vec<f64>); 3] = [
        ("dice_vs_lambda.svg", "Dice", records.iter().map(|r| r.dice_mean).collect()),
        (
            "folds_vs_lambda.svg",
            "% folding voxels",
            records.iter().map(|r| r.fold_pct_mean).collect(),
        ),
        (
            "sdlogj_vs_lambda.svg",
            "sdlog|J|",
            records.iter().map(|r| r.sdlog_j).collect(),
        ),
    ];
    for (file, ylabel, ys) in plots {
        let path = out_dir.join(file);
        fs::write(&path, line_plot_svg(&lambdas, &ys, "lambda", ylabel))?;
        written.push(path);
    }
    if let Some(curve) = dice_vs_iteration {
        let xs: Vec<f64> = curve.iter().map(|(i, _)| *i as f64).collect();
        let ys: Vec<f64> = curve.iter().map(|(_, d)| *d).collect();
        let path = out_dir.join("dice_vs_iteration.svg");
        fs::write(&path, line_plot_svg(&xs, &ys, "iteration", "Dice"))?;
        written.push(path);
    }
    Ok(written)
}

/// Minimal SVG line plot with axes, ticks, and labels.
pub fn line_plot_svg(xs: &[f64], ys: &[f64], xlabel: &str, ylabel: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 20.0;
    const MB: f64 = 55.0;
    let (x_lo, x_hi) = span(xs);
    let (y_lo, y_hi) = span(ys);
    let sx = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for t in 0..=4 {
        let fx = x_lo + (x_hi - x_lo) * t as f64 / 4.0;
        let fy = y_lo + (y_hi - y_lo) * t as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{:.3}</text>\n",
            sx(fx),
            H - MB + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{:.3}</text>\n",
            ML - 6.0,
            sy(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">{xlabel}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{ylabel}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    let points: Vec<String> = xs
        .iter()
        .zip(ys.iter())
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    for (x, y) in xs.iter().zip(ys.iter()) {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\"/>\n",
            sx(*x),
            sy(*y)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn span(xs: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_records() -> Vec<SweepRecord> {
        (0..5)
            .map(|i| SweepRecord {
                lambda: i as f64 * 0.1,
                dice_mean: 0.7 - 0.01 * i as f64,
                dice_sd: 0.02,
                dice30: 0.69 - 0.01 * i as f64,
                fold_pct_mean: 0.5 / (i + 1) as f64,
                fold_pct_sd: 0.05,
                sdlog_j: 0.09 - 0.005 * i as f64,
                mean_abs_v: 2.0 - 0.3 * i as f64,
            })
            .collect()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let records = sample_records();
        write_sweep_csv(&records, &path).unwrap();
        let back = read_sweep_csv(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn report_emits_nonempty_files() {
        let dir = tempdir().unwrap();
        let files = emit_report(&sample_records(), dir.path(), Some(&[(0, 0.5), (100, 0.7)]))
            .unwrap();
        assert_eq!(files.len(), 6);
        for f in files {
            let meta = std::fs::metadata(&f).unwrap();
            assert!(meta.len() > 0, "{} is empty", f.display());
            if f.extension().is_some_and(|e| e == "svg") {
                let text = std::fs::read_to_string(&f).unwrap();
                assert!(text.starts_with("<svg"));
                assert!(text.trim_end().ends_with("</svg>"));
            }
        }
    }

    #[test]
    fn empty_records_rejected() {
        let dir = tempdir().unwrap();
        assert!(emit_report(&[], dir.path(), None).is_err());
    }

    #[test]
    fn summary_table_column_order() {
        let table = render_summary_table(&[SummaryRow {
            method: "mi".into(),
            opt_lambda: 0.175,
            dice: 0.748,
            dice_sd: 0.021,
            dice30: 0.739,
            fold_pct: 0.461,
            fold_sd: 0.1,
            sdlog_j: 0.089,
            budget_violated: false,
        }]);
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols[0], "Method");
        assert!(cols[1].starts_with("Opt."));
        let idx = |name: &str| header.find(name).unwrap();
        assert!(idx("Method") < idx("Opt."));
        assert!(idx("Opt.") < idx("Dice"));
        assert!(idx("Dice") < idx("Dice30"));
        assert!(idx("Dice30") < idx("% Folds"));
        assert!(idx("% Folds") < idx("sdlog|J|"));
    }
}
