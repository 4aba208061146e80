//! Minimal SVG charts. Each file carries its underlying data as a CSV
//! block inside an XML comment so the numbers survive without a renderer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::aggregate::StrategyKind;
use crate::error::{Error, Result};
use crate::harness::runner::{read_summaries, seed_dir, strategy_dir, ExperimentOutcome};
use crate::metrics::{read_rounds_csv, RoundRecord};
use crate::similarity::ScoreMatrix;

const W: f64 = 720.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct ChartInputs {
    /// Mean test accuracy across seeds, one series per strategy.
    pub accuracy: Vec<Series>,
    /// Cumulative pairwise computations with and without elimination.
    pub comp_count: Vec<Series>,
    /// Final score matrix of the first seed's fdms run.
    pub heatmap: Option<ScoreMatrix>,
}

fn mean_accuracy(runs: &[&[RoundRecord]]) -> Vec<(f64, f64)> {
    let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    (0..len)
        .map(|t| {
            let s: f64 = runs.iter().map(|r| r[t].test_accuracy).sum();
            (t as f64, s / runs.len() as f64)
        })
        .collect()
}

fn comp_series(records: &[RoundRecord], present_sizes: &[usize]) -> Vec<Series> {
    let mut with = Vec::with_capacity(records.len());
    let mut without = Vec::with_capacity(records.len());
    let (mut a, mut b) = (0u64, 0u64);
    for (r, &p) in records.iter().zip(present_sizes) {
        a += r.comp_count_delta;
        b += (p * p.saturating_sub(1) / 2) as u64;
        with.push((r.t as f64, a as f64));
        without.push((r.t as f64, b as f64));
    }
    vec![
        Series { label: "fdms".into(), points: with },
        Series { label: "all pairs".into(), points: without },
    ]
}

impl ChartInputs {
    pub fn from_outcome(outcome: &ExperimentOutcome) -> Self {
        let mut by_kind: BTreeMap<StrategyKind, Vec<&[RoundRecord]>> = BTreeMap::new();
        for seed in &outcome.seeds {
            for run in &seed.runs {
                by_kind.entry(run.strategy).or_default().push(&run.records);
            }
        }
        let accuracy = by_kind
            .iter()
            .map(|(k, runs)| Series { label: k.as_str().into(), points: mean_accuracy(runs) })
            .collect();
        let first_fdms = outcome
            .seeds
            .first()
            .and_then(|s| s.run(StrategyKind::Fdms).map(|r| (s, r)));
        let (comp_count, heatmap) = match first_fdms {
            Some((seed, run)) => {
                let sizes: Vec<usize> = (0..run.records.len()).map(|t| seed.schedule.present(t).len()).collect();
                (
                    comp_series(&run.records, &sizes),
                    run.final_similarity.as_ref().map(ScoreMatrix::from_state),
                )
            }
            None => (Vec::new(), None),
        };
        Self { accuracy, comp_count, heatmap }
    }

    /// Rebuilds chart inputs from a finished output directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let summaries = read_summaries(&dir.join("summary.csv"))?;
        let mut by_kind: BTreeMap<StrategyKind, Vec<Vec<RoundRecord>>> = BTreeMap::new();
        for s in &summaries {
            let recs = read_rounds_csv(&strategy_dir(dir, s.seed, s.strategy).join("rounds.csv"))?;
            by_kind.entry(s.strategy).or_default().push(recs);
        }
        let accuracy = by_kind
            .iter()
            .map(|(k, runs)| {
                let refs: Vec<&[RoundRecord]> = runs.iter().map(|r| r.as_slice()).collect();
                Series { label: k.as_str().into(), points: mean_accuracy(&refs) }
            })
            .collect();
        let mut inputs = Self { accuracy, ..Default::default() };
        let Some(seed) = summaries.iter().find(|s| s.strategy == StrategyKind::Fdms).map(|s| s.seed) else {
            return Ok(inputs);
        };
        let fdir = strategy_dir(dir, seed, StrategyKind::Fdms);
        let sched_path = seed_dir(dir, seed).join("schedule.json");
        let text = fs::read_to_string(&sched_path).map_err(|e| Error::io(&sched_path, e))?;
        let participation: Vec<Vec<usize>> = serde_json::from_str(&text)?;
        let sizes: Vec<usize> = participation.iter().map(Vec::len).collect();
        let records = read_rounds_csv(&fdir.join("rounds.csv"))?;
        inputs.comp_count = comp_series(&records, &sizes);
        let sim = fdir.join("similarity_final.csv");
        if sim.exists() {
            inputs.heatmap = Some(ScoreMatrix::read_csv(&sim)?);
        }
        Ok(inputs)
    }
}

fn extent(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let mut e: Option<(f64, f64, f64, f64)> = None;
    for &(x, y) in pts {
        e = Some(match e {
            None => (x, x, y, y),
            Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
        });
    }
    e
}

fn data_comment(series: &[Series]) -> String {
    let mut s = String::from("<!--\nseries,x,y\n");
    for ser in series {
        for (x, y) in &ser.points {
            let _ = writeln!(s, "{},{x},{y}", ser.label);
        }
    }
    s.push_str("-->\n");
    s
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    svg.push_str(&data_comment(series));
    let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{title}</text>", W / 2.0);
    let (x0, x1, mut y0, mut y1) = extent(series).unwrap_or((0.0, 1.0, 0.0, 1.0));
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let xr = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| PAD + (x - x0) / xr * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + xr * i as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{fy:.3}</text>", PAD - 4.0, py(fy) + 4.0);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{fx:.0}</text>", px(fx), H - PAD + 16.0);
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>", W / 2.0, H - 12.0);
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>",
        H / 2.0,
        H / 2.0
    );
    for (n, s) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = PAD + 16.0 * n as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - PAD - 110.0,
            ly - 4.0,
            W - PAD - 94.0,
            ly,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn heatmap(title: &str, m: &ScoreMatrix) -> String {
    let k = m.n_clients.max(1);
    let cell = ((H - 2.0 * PAD) / k as f64).floor().max(2.0);
    let size = 2.0 * PAD + cell * k as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n<!--\ni,j,R\n"
    );
    for i in 0..m.n_clients {
        for j in 0..m.n_clients {
            let r = m.get(i, j).map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(svg, "{i},{j},{r}");
        }
    }
    svg.push_str("-->\n");
    let _ = writeln!(svg, "<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", size / 2.0);
    for i in 0..m.n_clients {
        for j in 0..m.n_clients {
            let fill = match m.get(i, j) {
                Some(r) => {
                    let v = (255.0 * (1.0 - r.clamp(0.0, 1.0))).round() as u8;
                    format!("rgb({v},{v},255)")
                }
                None => "#dddddd".to_string(),
            };
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\"/>",
                PAD + cell * j as f64,
                PAD + cell * i as f64
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes whatever charts the inputs support and returns their paths.
pub fn emit_charts(inputs: &ChartInputs, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    if !inputs.accuracy.is_empty() {
        let p = dir.join("accuracy.svg");
        write(&p, &line_chart("Test accuracy (mean over seeds)", "round", "accuracy", &inputs.accuracy))?;
        out.push(p);
    }
    if !inputs.comp_count.is_empty() {
        let p = dir.join("comp_count.svg");
        write(&p, &line_chart("Cumulative similarity computations", "round", "pairs scored", &inputs.comp_count))?;
        out.push(p);
    }
    match &inputs.heatmap {
        Some(m) => {
            let p = dir.join("similarity_heatmap.svg");
            write(&p, &heatmap("Final similarity scores", m))?;
            out.push(p);
        }
        None => info!("no similarity snapshot available; skipping heat map"),
    }
    if out.is_empty() {
        warn!("nothing to chart in {}", dir.display());
    }
    Ok(out)
}
