//! Aggregates summary rows into a per-method table and SVG bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiment::{read_summary, SummaryRow, SUMMARY_FILE};

pub const TABLE_FILE: &str = "table.csv";
pub const ACCURACY_PLOT: &str = "accuracy.svg";
pub const MMD_PLOT: &str = "mmd.svg";

/// Mean and sample standard deviation (`n - 1` denominator). The deviation is
/// `None` for fewer than two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Self { n, mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub seeds: usize,
    pub student: Option<Stat>,
    pub teacher: Option<Stat>,
    pub mmd_before: Option<Stat>,
    pub mmd_after: Option<Stat>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<TableRow>,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Summary files in `dir` and up to two directory levels below it.
fn find_summaries(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let file = dir.join(SUMMARY_FILE);
    if file.is_file() {
        found.push(file);
    }
    if depth == 0 {
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(HarnessError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_summaries(&d, depth - 1, found)?;
    }
    Ok(())
}

/// Groups rows by method in order of first appearance. Failed rows are
/// skipped.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<TableRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let group: Vec<&SummaryRow> =
                rows.iter().filter(|r| r.is_ok() && r.method == m).collect();
            let col = |f: fn(&SummaryRow) -> Option<f64>| {
                Stat::of(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            TableRow {
                method: m.into(),
                seeds: group.len(),
                student: col(|r| r.student_top1),
                teacher: col(|r| r.teacher_top1),
                mmd_before: col(|r| r.mmd_before),
                mmd_after: col(|r| r.mmd_after),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "seeds".into()];
    for c in ["student_top1", "teacher_top1", "mmd_before", "mmd_after"] {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    header.push("mmd_before_x100_mean".into());
    header.push("mmd_after_x100_mean".into());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.method.clone(), r.seeds.to_string()];
        for s in [r.student, r.teacher, r.mmd_before, r.mmd_after] {
            rec.push(fmt_opt(s.map(|s| s.mean)));
            rec.push(fmt_opt(s.and_then(|s| s.std)));
        }
        for s in [r.mmd_before, r.mmd_after] {
            rec.push(fmt_opt(s.map(|s| 100.0 * s.mean)));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Vertical bar chart with optional error bars. `series` holds one
/// `(label, colour)` pair per bar within a group; `values[g][s]` is the
/// statistic of series `s` in group `g`.
pub fn bar_chart_svg(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[(&str, &str)],
    values: &[Vec<Option<Stat>>],
) -> String {
    let (w, h, left, bottom, top) = (120.0 + 90.0 * groups.len() as f64, 360.0, 70.0, 80.0, 40.0);
    let plot_h = h - bottom - top;
    let y_max = values
        .iter()
        .flatten()
        .flatten()
        .map(|s| s.mean + s.std.unwrap_or(0.0))
        .fold(0.0_f64, f64::max)
        .max(1e-12)
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - bottom,
        w - 20.0
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="15" y="{0}" transform="rotate(-90 15 {0})" text-anchor="middle">{1}</text>"#,
        top + plot_h / 2.0,
        escape(y_label)
    );
    let bar_w = 60.0 / series.len() as f64;
    for (g, name) in groups.iter().enumerate() {
        let x0 = left + 20.0 + 90.0 * g as f64;
        for (k, (_, colour)) in series.iter().enumerate() {
            let Some(stat) = values[g][k] else { continue };
            let x = x0 + bar_w * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{colour}"/>"#,
                y(stat.mean),
                bar_w - 2.0,
                (h - bottom) - y(stat.mean)
            );
            if let Some(sd) = stat.std {
                let cx = x + (bar_w - 2.0) / 2.0;
                let (lo, hi) = (y((stat.mean - sd).max(0.0)), y(stat.mean + sd));
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>"#
                );
                for yy in [lo, hi] {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="black"/>"#,
                        cx - 4.0,
                        cx + 4.0
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{0:.1}" y="{1}" transform="rotate(30 {0:.1} {1})">{2}</text>"#,
            x0 + 5.0,
            h - bottom + 14.0,
            escape(name)
        );
    }
    if series.len() > 1 {
        for (k, (label, colour)) in series.iter().enumerate() {
            let yy = top + 14.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{colour}"/>"#,
                w - 110.0,
                yy
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                w - 95.0,
                yy + 9.0,
                escape(label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Reads every summary under `results`, writes the table and plots into
/// `out`, and returns what was written. The MMD plot is skipped with a
/// warning when no row carries MMD values.
pub fn tabulate(results: &Path, out: &Path) -> Result<Report> {
    if !results.is_dir() {
        return Err(HarnessError::MissingArtifact {
            path: results.to_path_buf(),
        });
    }
    let mut files = Vec::new();
    find_summaries(results, 2, &mut files)?;
    let mut all = Vec::new();
    for f in &files {
        all.extend(read_summary(f)?);
    }
    let rows = aggregate(&all);
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults(results.to_path_buf()));
    }
    fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    let mut written = Vec::new();
    let mut warnings = Vec::new();
    let write = |name: &str, text: String, written: &mut Vec<PathBuf>| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(HarnessError::io(&p))?;
        written.push(p);
        Ok(())
    };
    write(TABLE_FILE, table_csv(&rows), &mut written)?;

    let acc: Vec<&TableRow> = rows
        .iter()
        .filter(|r| r.student.is_some() || r.teacher.is_some())
        .collect();
    if acc.is_empty() {
        warnings.push("no accuracy values; accuracy plot skipped".to_string());
    } else {
        let groups: Vec<String> = acc.iter().map(|r| r.method.clone()).collect();
        let values: Vec<Vec<Option<Stat>>> =
            acc.iter().map(|r| vec![r.student, r.teacher]).collect();
        let svg = bar_chart_svg(
            "Top-1 accuracy by method",
            "top-1",
            &groups,
            &[("student", "#4c72b0"), ("teacher", "#dd8452")],
            &values,
        );
        write(ACCURACY_PLOT, svg, &mut written)?;
    }

    let mmd: Vec<&TableRow> = rows
        .iter()
        .filter(|r| r.mmd_before.is_some() || r.mmd_after.is_some())
        .collect();
    if mmd.is_empty() {
        warnings.push("no MMD columns in the results; MMD plot skipped".to_string());
    } else {
        let groups: Vec<String> = mmd.iter().map(|r| r.method.clone()).collect();
        let values: Vec<Vec<Option<Stat>>> = mmd
            .iter()
            .map(|r| vec![r.mmd_before, r.mmd_after])
            .collect();
        let svg = bar_chart_svg(
            "Broad/target MMD",
            "MMD",
            &groups,
            &[("before", "#8c8c8c"), ("after", "#55a868")],
            &values,
        );
        write(MMD_PLOT, svg, &mut written)?;
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Report {
        rows,
        files: written,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, acc: f64) -> SummaryRow {
        SummaryRow {
            config_hash: "h".into(),
            seed,
            method: method.into(),
            teacher_top1: None,
            student_top1: Some(acc),
            mmd_before: None,
            mmd_after: None,
            status: "ok".into(),
            record: String::new(),
        }
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        // mean 0.5, squared deviations sum to 0.1, /4 -> 0.025
        let s = Stat::of(&[0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.std.unwrap() - 0.025f64.sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[0.4]).unwrap().std, None);
        assert_eq!(Stat::of(&[]), None);
    }

    #[test]
    fn failed_rows_are_left_out() {
        let mut bad = row("a", 2, 0.0);
        bad.status = "failed: boom".into();
        let t = aggregate(&[row("a", 0, 0.5), row("b", 0, 0.2), bad, row("a", 1, 0.7)]);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].method, "a");
        assert_eq!(t[0].seeds, 2);
        assert!((t[0].student.unwrap().mean - 0.6).abs() < 1e-15);
    }

    #[test]
    fn chart_draws_one_bar_per_value() {
        let svg = bar_chart_svg(
            "t",
            "y",
            &["a".into(), "b<".into()],
            &[("s", "#000")],
            &[vec![Stat::of(&[0.5, 0.6])], vec![None]],
        );
        assert_eq!(svg.matches("<rect").count(), 1);
        assert!(svg.contains("b&lt;"));
    }
}
