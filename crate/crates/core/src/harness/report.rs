use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{Phase, RunManifest, RunStatus};
use super::{HarnessError, PipelineVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: PipelineVariant,
    pub recall_dpo: bool,
    pub analyze_dpo: bool,
    pub seed: u64,
    pub phase: Phase,
    pub iteration: usize,
    pub accuracy: f64,
}

pub fn result_rows(manifests: &[RunManifest]) -> Vec<ResultRow> {
    manifests
        .iter()
        .filter(|m| m.status == RunStatus::Complete)
        .flat_map(|m| {
            m.phases.iter().map(move |p| ResultRow {
                variant: m.variant,
                recall_dpo: m.toggles.recall,
                analyze_dpo: m.toggles.analyze,
                seed: m.seed,
                phase: p.phase,
                iteration: p.iteration,
                accuracy: p.test_accuracy,
            })
        })
        .collect()
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

type CellKey = (PipelineVariant, bool, bool);

/// One summary line: a (variant, toggles) cell averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub variant: PipelineVariant,
    pub recall_dpo: bool,
    pub analyze_dpo: bool,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Mean minus the same variant's acquisition-only mean, when this cell
    /// uses DPO and that baseline exists.
    pub delta: Option<f64>,
}

fn toggle_rank(recall: bool, analyze: bool) -> u8 {
    match (recall, analyze) {
        (false, false) => 0,
        (true, false) => 1,
        (false, true) => 2,
        (true, true) => 3,
    }
}

pub fn summarize(manifests: &[RunManifest]) -> Vec<SummaryCell> {
    let mut cells: BTreeMap<CellKey, Vec<(u64, f64)>> = BTreeMap::new();
    for m in manifests.iter().filter(|m| m.status == RunStatus::Complete) {
        if let Some(acc) = m.final_accuracy() {
            cells
                .entry((m.variant, m.toggles.recall, m.toggles.analyze))
                .or_default()
                .push((m.seed, acc));
        }
    }
    let mean = |v: &[(u64, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let mut out: Vec<SummaryCell> = cells
        .iter()
        .map(|(&(variant, r, a), values)| {
            let m = mean(values);
            let delta = if r || a {
                cells.get(&(variant, false, false)).map(|b| m - mean(b))
            } else {
                None
            };
            SummaryCell {
                variant,
                recall_dpo: r,
                analyze_dpo: a,
                seeds: values.iter().map(|x| x.0).collect(),
                mean: m,
                delta,
            }
        })
        .collect();
    out.sort_by_key(|c| (c.variant, toggle_rank(c.recall_dpo, c.analyze_dpo)));
    out
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

pub fn summary_markdown(cells: &[SummaryCell]) -> String {
    let mut s = String::from("# Results\n\nHeld-out accuracy (%) averaged over seeds. Parenthesized values are differences from the acquisition-only row of the same variant.\n\n");
    s.push_str("| Variant | Recall DPO | Analyze DPO | Seeds | Accuracy (%) |\n|---|---|---|---|---|\n");
    for c in cells {
        let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
        let mut acc = format!("{:.2}", 100.0 * c.mean);
        if let Some(d) = c.delta {
            let _ = write!(acc, " ({:+.2})", 100.0 * d);
        }
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {acc} |",
            c.variant,
            mark(c.recall_dpo),
            mark(c.analyze_dpo),
            seeds.join(", ")
        );
    }
    s
}

const W: f64 = 520.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_frame(title: &str, body: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
        W / 2.0
    );
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>",
        W - PAD / 2.0
    );
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    for tick in 0..=4 {
        let v = tick as f64 * 25.0;
        let y = y0 - (y0 - y1) * v / 100.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v}</text>",
            x0 - 4.0,
            y + 4.0
        );
        let _ = writeln!(
            s,
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>",
            W - PAD / 2.0
        );
    }
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

fn y_of(acc: f64) -> f64 {
    (H - PAD) - (H - 2.0 * PAD) * acc
}

/// Bars of acquisition-only accuracy per variant.
pub fn variant_chart(cells: &[SummaryCell]) -> String {
    let bars: Vec<&SummaryCell> = cells.iter().filter(|c| !c.recall_dpo && !c.analyze_dpo).collect();
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    let mut body = String::new();
    for (i, c) in bars.iter().enumerate() {
        let x = PAD + slot * (i as f64 + 0.2);
        let y = y_of(c.mean);
        let _ = writeln!(
            body,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#4878a8\"/>",
            slot * 0.6,
            (H - PAD) - y
        );
        let cx = x + slot * 0.3;
        let _ = writeln!(
            body,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.1}</text>",
            y - 4.0,
            100.0 * c.mean
        );
        let _ = writeln!(
            body,
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - PAD + 16.0,
            c.variant
        );
    }
    svg_frame("Accuracy (%) by pipeline variant", &body)
}

/// Lines of mean accuracy per reflection iteration for each toggle row of
/// the full variant; iteration 0 is the acquisition-only model.
pub fn iteration_chart(rows: &[ResultRow]) -> String {
    let full: Vec<&ResultRow> = rows.iter().filter(|r| r.variant == PipelineVariant::Full).collect();
    let base: Vec<f64> = full
        .iter()
        .filter(|r| r.phase == Phase::Acquisition)
        .map(|r| r.accuracy)
        .collect();
    let mut series: BTreeMap<(u8, bool, bool), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in full.iter().filter(|r| r.phase == Phase::Reflection) {
        series
            .entry((toggle_rank(r.recall_dpo, r.analyze_dpo), r.recall_dpo, r.analyze_dpo))
            .or_default()
            .entry(r.iteration)
            .or_default()
            .push(r.accuracy);
    }
    let max_t = series
        .values()
        .flat_map(|s| s.keys().copied())
        .max()
        .unwrap_or(1)
        .max(1);
    let x_of = |t: usize| PAD + (W - 2.0 * PAD) * t as f64 / max_t as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let colors = ["#4878a8", "#d08030", "#409050"];
    let mut body = String::new();
    for t in 0..=max_t {
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{t}</text>",
            x_of(t),
            H - PAD + 16.0
        );
    }
    for (k, ((_, r, a), points)) in series.iter().enumerate() {
        let mut pts: Vec<(usize, f64)> = Vec::new();
        if !base.is_empty() {
            pts.push((0, mean(&base)));
        }
        pts.extend(points.iter().map(|(t, v)| (*t, mean(v))));
        let path: Vec<String> = pts
            .iter()
            .map(|(t, v)| format!("{:.1},{:.1}", x_of(*t), y_of(*v)))
            .collect();
        let color = colors[k % colors.len()];
        let _ = writeln!(
            body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        let label = format!(
            "recall {} / analyze {}",
            if *r { "on" } else { "off" },
            if *a { "on" } else { "off" }
        );
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{label}</text>",
            PAD + 8.0,
            PAD + 14.0 * (k as f64 + 1.0)
        );
    }
    svg_frame("Accuracy (%) by reflection iteration", &body)
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub results_csv: PathBuf,
    pub summary_md: PathBuf,
    pub charts: Vec<PathBuf>,
}

/// Writes results.csv, summary.md and two SVG charts into `dir`.
pub fn report(manifests: &[RunManifest], dir: &Path) -> Result<ReportFiles, HarnessError> {
    if manifests.is_empty() {
        return Err(HarnessError::Config("no manifests to report".into()));
    }
    fs::create_dir_all(dir)?;
    let rows = result_rows(manifests);
    let cells = summarize(manifests);
    let files = ReportFiles {
        results_csv: dir.join("results.csv"),
        summary_md: dir.join("summary.md"),
        charts: vec![
            dir.join("accuracy_by_variant.svg"),
            dir.join("accuracy_by_iteration.svg"),
        ],
    };
    write_results_csv(&files.results_csv, &rows)?;
    fs::write(&files.summary_md, summary_markdown(&cells))?;
    fs::write(&files.charts[0], variant_chart(&cells))?;
    fs::write(&files.charts[1], iteration_chart(&rows))?;
    Ok(files)
}

/// Loads every `manifest.json` below `dir`, sorted by run id.
pub fn collect_manifests(dir: &Path) -> Result<Vec<RunManifest>, HarnessError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "manifest.json") {
                out.push(RunManifest::load(&path)?);
            }
        }
    }
    out.sort_by(|a, b| {
        (a.seed, a.variant, toggle_rank(a.toggles.recall, a.toggles.analyze)).cmp(&(
            b.seed,
            b.variant,
            toggle_rank(b.toggles.recall, b.toggles.analyze),
        ))
    });
    Ok(out)
}
