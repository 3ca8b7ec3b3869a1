//! Statistics over run records plus the CSV and SVG emitters behind the
//! standard figures: score curves, reward histograms, predicted-vs-actual
//! reward heatmaps, and the capacity-sweep correlation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::harness::RunRecord;
use crate::models::{median, Sequence};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("inputs have lengths {left} and {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("the {0} input has zero variance, correlation is undefined")]
    ZeroVariance(&'static str),
    #[error("empty input")]
    Empty,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("bins must be at least 1")]
    ZeroBins,
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("upper range bound must be positive, got {0}")]
    BadRange(f64),
    #[error("curve x values must strictly increase (violated at index {0})")]
    NotIncreasing(usize),
    #[error("inference time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("run for scale level {0} has no evaluation scores")]
    NoEvals(u32),
}

/// A score-over-frames trace, optionally stacked per seed with `y` as the
/// pointwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub per_seed: Option<Vec<Vec<f64>>>,
}

impl Curve {
    pub fn new(x: Vec<f64>, y: Vec<f64>, per_seed: Option<Vec<Vec<f64>>>) -> Result<Self, AnalysisError> {
        if x.is_empty() {
            return Err(AnalysisError::Empty);
        }
        if x.len() != y.len() {
            return Err(AnalysisError::LengthMismatch { left: x.len(), right: y.len() });
        }
        if let Some(i) = x.windows(2).position(|w| w[1] <= w[0]) {
            return Err(AnalysisError::NotIncreasing(i + 1));
        }
        if let Some(rows) = &per_seed {
            for row in rows {
                if row.len() != x.len() {
                    return Err(AnalysisError::LengthMismatch { left: x.len(), right: row.len() });
                }
            }
        }
        Ok(Self { x, y, per_seed })
    }

    /// Stacks equal-length seed traces over a shared x axis; `y` becomes the
    /// pointwise mean.
    pub fn from_seeds(x: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self, AnalysisError> {
        if rows.is_empty() {
            return Err(AnalysisError::Empty);
        }
        let n = rows.len() as f64;
        let mut y = vec![0.0; x.len()];
        for row in &rows {
            if row.len() != x.len() {
                return Err(AnalysisError::LengthMismatch { left: x.len(), right: row.len() });
            }
            for (acc, v) in y.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut y {
            *v /= n;
        }
        Self::new(x, y, Some(rows))
    }
}

/// Sample Pearson correlation, clamped into [-1, 1] against rounding spill.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.len() < 2 {
        return Err(AnalysisError::TooFew(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 {
        return Err(AnalysisError::ZeroVariance("first"));
    }
    if vy == 0.0 {
        return Err(AnalysisError::ZeroVariance("second"));
    }
    Ok((cov / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Trailing moving average: each point becomes the mean of the last
/// `min(window, points so far)` values. The x axis and any per-seed rows are
/// smoothed the same way.
pub fn moving_average(curve: &Curve, window: usize) -> Result<Curve, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::ZeroWindow);
    }
    let smooth = |ys: &[f64]| -> Vec<f64> {
        (0..ys.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window);
                let span = &ys[lo..=i];
                span.iter().sum::<f64>() / span.len() as f64
            })
            .collect()
    };
    Curve::new(
        curve.x.clone(),
        smooth(&curve.y),
        curve.per_seed.as_ref().map(|rows| rows.iter().map(|r| smooth(r)).collect()),
    )
}

/// Counts of `values` over `bins` equal-width bins spanning `[0, hi]`.
/// Values outside the range land in the nearest edge bin.
pub fn histogram(values: &[f64], bins: usize, hi: f64) -> Result<Vec<usize>, AnalysisError> {
    if bins == 0 {
        return Err(AnalysisError::ZeroBins);
    }
    if !(hi > 0.0) {
        return Err(AnalysisError::BadRange(hi));
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[bin_index(v, bins, hi)] += 1;
    }
    Ok(counts)
}

fn bin_index(v: f64, bins: usize, hi: f64) -> usize {
    let raw = (v / hi * bins as f64).floor();
    (raw.max(0.0) as usize).min(bins - 1)
}

/// Histogram of every step reward in the given episodes, spanning `[0, hi]`
/// where `hi` is normally the action repeat.
pub fn reward_histogram<'a, I>(episodes: I, bins: usize, hi: f64) -> Result<Vec<usize>, AnalysisError>
where
    I: IntoIterator<Item = &'a Sequence>,
{
    let rewards: Vec<f64> =
        episodes.into_iter().flat_map(|s| s.rewards[1..].iter().copied()).collect();
    histogram(&rewards, bins, hi)
}

/// Predicted-vs-actual reward counts on a square grid over `[0, hi]`, with
/// the mass on, above, and below the reference diagonal tallied separately.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    /// Shared bin edges for both axes, `bins + 1` values.
    pub edges: Vec<f64>,
    /// `counts[predicted_bin][actual_bin]`.
    pub counts: Vec<Vec<usize>>,
    pub diagonal: usize,
    /// Pairs whose predicted bin exceeds the actual bin (optimistic).
    pub above: usize,
    /// Pairs whose predicted bin falls short of the actual bin (pessimistic).
    pub below: usize,
}

impl HeatmapGrid {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Optimistic over pessimistic mass. Infinite when nothing is
    /// pessimistic, NaN when everything sits on the diagonal.
    pub fn optimism_ratio(&self) -> f64 {
        self.above as f64 / self.below as f64
    }
}

pub fn reward_heatmap(
    predicted: &[f64],
    actual: &[f64],
    bins: usize,
    hi: f64,
) -> Result<HeatmapGrid, AnalysisError> {
    if predicted.len() != actual.len() {
        return Err(AnalysisError::LengthMismatch { left: predicted.len(), right: actual.len() });
    }
    if bins == 0 {
        return Err(AnalysisError::ZeroBins);
    }
    if !(hi > 0.0) {
        return Err(AnalysisError::BadRange(hi));
    }
    let mut grid = HeatmapGrid {
        edges: (0..=bins).map(|i| i as f64 * hi / bins as f64).collect(),
        counts: vec![vec![0usize; bins]; bins],
        diagonal: 0,
        above: 0,
        below: 0,
    };
    for (&p, &a) in predicted.iter().zip(actual) {
        let pi = bin_index(p, bins, hi);
        let ai = bin_index(a, bins, hi);
        grid.counts[pi][ai] += 1;
        match pi.cmp(&ai) {
            std::cmp::Ordering::Greater => grid.above += 1,
            std::cmp::Ordering::Less => grid.below += 1,
            std::cmp::Ordering::Equal => grid.diagonal += 1,
        }
    }
    Ok(grid)
}

/// Linear-interpolation percentile: rank `p/100 * (n-1)` between the sorted
/// order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, AnalysisError> {
    if values.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(AnalysisError::BadPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Score divided by per-step inference time.
pub fn cost_normalized(score: f64, seconds_per_step: f64) -> Result<f64, AnalysisError> {
    if !(seconds_per_step > 0.0) {
        return Err(AnalysisError::NonPositiveTime(seconds_per_step));
    }
    Ok(score / seconds_per_step)
}

/// One capacity level of the sweep: pooled loss medians and the score
/// statistics across that level's runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scale_level: u32,
    pub image_loss: f64,
    pub reward_loss: f64,
    pub score_mean: f64,
    pub score_stddev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Correlation of per-run median image loss with asymptotic score;
    /// absent when either side has no spread.
    pub rho_image: Option<f64>,
    /// Same for the reward loss.
    pub rho_reward: Option<f64>,
}

/// Groups completed runs by capacity level and correlates their losses with
/// their asymptotic scores (the mean of each run's last tenth of
/// evaluations, at least one).
pub fn scale_sweep_report(runs: &[RunRecord]) -> Result<SweepReport, AnalysisError> {
    if runs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut by_level: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        by_level.entry(r.config.scale_level).or_default().push(r);
    }
    let asymptotic = |r: &RunRecord| -> Result<f64, AnalysisError> {
        if r.evals.is_empty() {
            return Err(AnalysisError::NoEvals(r.config.scale_level));
        }
        let tail = r.evals.len().div_ceil(10);
        let scores = &r.evals[r.evals.len() - tail..];
        Ok(scores.iter().map(|e| e.score).sum::<f64>() / tail as f64)
    };
    let med = |v: &[f64]| if v.is_empty() { 0.0 } else { median(v) };

    let mut rows = Vec::new();
    let mut image_losses = Vec::new();
    let mut reward_losses = Vec::new();
    let mut scores = Vec::new();
    for (&level, group) in &by_level {
        let mut pooled_image = Vec::new();
        let mut pooled_reward = Vec::new();
        let mut group_scores = Vec::new();
        for r in group {
            let run_image: Vec<f64> = r.losses.iter().map(|l| l.image_nll).collect();
            let run_reward: Vec<f64> = r.losses.iter().map(|l| l.reward_loss).collect();
            let score = asymptotic(r)?;
            image_losses.push(med(&run_image));
            reward_losses.push(med(&run_reward));
            scores.push(score);
            pooled_image.extend(run_image);
            pooled_reward.extend(run_reward);
            group_scores.push(score);
        }
        let n = group_scores.len() as f64;
        let mean = group_scores.iter().sum::<f64>() / n;
        let var = group_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        rows.push(SweepRow {
            scale_level: level,
            image_loss: med(&pooled_image),
            reward_loss: med(&pooled_reward),
            score_mean: mean,
            score_stddev: var.sqrt(),
        });
    }
    Ok(SweepReport {
        rows,
        rho_image: pearson(&image_losses, &scores).ok(),
        rho_reward: pearson(&reward_losses, &scores).ok(),
    })
}

pub fn write_curve_csv(curve: &Curve, path: &Path) -> Result<(), AnalysisError> {
    let mut out = String::from("env_frames,score");
    if let Some(rows) = &curve.per_seed {
        for i in 0..rows.len() {
            write!(out, ",seed{i}").unwrap();
        }
    }
    out.push('\n');
    for i in 0..curve.x.len() {
        write!(out, "{},{}", curve.x[i], curve.y[i]).unwrap();
        if let Some(rows) = &curve.per_seed {
            for row in rows {
                write!(out, ",{}", row[i]).unwrap();
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_histogram_csv(counts: &[usize], hi: f64, path: &Path) -> Result<(), AnalysisError> {
    let width = hi / counts.len() as f64;
    let mut out = String::from("bin_low,bin_high,count\n");
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{},{},{}", i as f64 * width, (i + 1) as f64 * width, c).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_heatmap_csv(grid: &HeatmapGrid, path: &Path) -> Result<(), AnalysisError> {
    let mut out = String::from("predicted_bin,actual_bin,count\n");
    for (pi, row) in grid.counts.iter().enumerate() {
        for (ai, c) in row.iter().enumerate() {
            writeln!(out, "{pi},{ai},{c}").unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<(), AnalysisError> {
    let mut out = String::from("scale,image_loss,reward_loss,score_mean,score_stddev\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.scale_level, r.image_loss, r.reward_loss, r.score_mean, r.score_stddev
        )
        .unwrap();
    }
    let fmt = |rho: Option<f64>| rho.map_or(String::new(), |v| v.to_string());
    writeln!(out, "rho,{},{},,", fmt(report.rho_image), fmt(report.rho_reward)).unwrap();
    std::fs::write(path, out)?;
    Ok(())
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 420.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x_hi - self.x_lo).max(1e-12);
        MARGIN + (x - self.x_lo) / span * (PLOT_W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y_hi - self.y_lo).max(1e-12);
        PLOT_H - MARGIN - (y - self.y_lo) / span * (PLOT_H - 2.0 * MARGIN)
    }
}

fn svg_open(out: &mut String) {
    write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n"
    )
    .unwrap();
}

fn svg_axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let x1 = PLOT_W - MARGIN;
    let y0 = PLOT_H - MARGIN;
    let y1 = MARGIN;
    write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{x0}\" y=\"{:.1}\" text-anchor=\"start\">{:.3}</text>\n\
         <text x=\"{x1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"start\">{:.3}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"start\">{:.3}</text>\n\
         <text x=\"12\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 12 {:.1})\">{y_label}</text>\n",
        y0 + 16.0,
        f.x_lo,
        y0 + 16.0,
        f.x_hi,
        (x0 + x1) / 2.0,
        y0 + 32.0,
        4.0,
        y0,
        f.y_lo,
        4.0,
        y1 + 4.0,
        f.y_hi,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    )
    .unwrap();
}

fn polyline(out: &mut String, f: &Frame, xs: &[f64], ys: &[f64], color: &str, width: f64, opacity: f64) {
    let mut points = String::new();
    for (&x, &y) in xs.iter().zip(ys) {
        write!(points, "{:.1},{:.1} ", f.px(x), f.py(y)).unwrap();
    }
    write!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" \
         stroke-opacity=\"{opacity}\"/>\n",
        points.trim_end()
    )
    .unwrap();
}

/// Score curves, one color per labeled curve, per-seed traces drawn thin
/// underneath the mean.
pub fn plot_curves_svg(curves: &[(String, Curve)], path: &Path) -> Result<(), AnalysisError> {
    if curves.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut f = Frame { x_lo: f64::INFINITY, x_hi: f64::NEG_INFINITY, y_lo: f64::INFINITY, y_hi: f64::NEG_INFINITY };
    for (_, c) in curves {
        for &x in &c.x {
            f.x_lo = f.x_lo.min(x);
            f.x_hi = f.x_hi.max(x);
        }
        let ys = c.per_seed.as_ref().map_or_else(|| vec![c.y.clone()], |r| r.clone());
        for row in ys.iter().chain(std::iter::once(&c.y)) {
            for &y in row {
                f.y_lo = f.y_lo.min(y);
                f.y_hi = f.y_hi.max(y);
            }
        }
    }
    let mut out = String::new();
    svg_open(&mut out);
    svg_axes(&mut out, &f, "environment frames", "score");
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(rows) = &c.per_seed {
            for row in rows {
                polyline(&mut out, &f, &c.x, row, color, 1.0, 0.3);
            }
        }
        polyline(&mut out, &f, &c.x, &c.y, color, 2.0, 1.0);
        write!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{label}</text>\n",
            PLOT_W - MARGIN + 4.0 - 60.0,
            MARGIN + 14.0 * (i as f64 + 1.0)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

pub fn plot_histogram_svg(counts: &[usize], hi: f64, path: &Path) -> Result<(), AnalysisError> {
    if counts.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let f = Frame { x_lo: 0.0, x_hi: hi, y_lo: 0.0, y_hi: peak };
    let mut out = String::new();
    svg_open(&mut out);
    svg_axes(&mut out, &f, "step reward", "count");
    let width = hi / counts.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let x = f.px(i as f64 * width);
        let w = f.px(width) - f.px(0.0);
        let y = f.py(c as f64);
        let h = f.py(0.0) - y;
        write!(
            out,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" \
             fill=\"#1f77b4\" stroke=\"white\" stroke-width=\"0.5\"/>\n"
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Heatmap of predicted-vs-actual reward counts with a dashed reference
/// diagonal where prediction equals outcome.
pub fn plot_heatmap_svg(grid: &HeatmapGrid, path: &Path) -> Result<(), AnalysisError> {
    let bins = grid.counts.len();
    if bins == 0 {
        return Err(AnalysisError::Empty);
    }
    let hi = *grid.edges.last().unwrap();
    let f = Frame { x_lo: 0.0, x_hi: hi, y_lo: 0.0, y_hi: hi };
    let peak = grid.counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut out = String::new();
    svg_open(&mut out);
    svg_axes(&mut out, &f, "actual reward", "predicted reward");
    for (pi, row) in grid.counts.iter().enumerate() {
        for (ai, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let x = f.px(grid.edges[ai]);
            let y = f.py(grid.edges[pi + 1]);
            let w = f.px(grid.edges[1]) - f.px(grid.edges[0]);
            let h = f.py(grid.edges[0]) - f.py(grid.edges[1]);
            let opacity = 0.15 + 0.85 * (c as f64 / peak);
            write!(
                out,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" \
                 fill=\"#d62728\" fill-opacity=\"{opacity:.3}\"/>\n"
            )
            .unwrap();
        }
    }
    write!(
        out,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"green\" \
         stroke-dasharray=\"6,4\" stroke-width=\"1.5\"/>\n",
        f.px(0.0),
        f.py(0.0),
        f.px(hi),
        f.py(hi)
    )
    .unwrap();
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}
