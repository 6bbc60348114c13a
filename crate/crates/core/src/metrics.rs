//! ROC analysis: AUC, curve points, bootstrap intervals and per-node reports.
//!
//! AUC is the Mann-Whitney statistic with ties counted as one half. A label
//! vector with no positives or no negatives has no AUC; such nodes are kept
//! in reports but excluded from the average.
//!
//! Confidence intervals use a stratified percentile bootstrap. DeLong's
//! method would be an analytic alternative.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::{propagate, LabelSet};
use crate::predictions::PredictionMatrix;
use crate::taxonomy::{NodeId, Taxonomy};

pub const DEFAULT_BOOTSTRAP: usize = 2000;
pub const MIN_BOOTSTRAP: usize = 100;
pub const CI_LEVELS: (f64, f64) = (2.5, 97.5);
/// False-positive-rate grid size of ROC bands in reports.
pub const BAND_GRID: usize = 51;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    Ok(())
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Score order shared by the point estimate and the bootstrap.
struct Ranked {
    /// indices sorted by ascending score
    order: Vec<usize>,
    /// start offsets of runs of equal scores in `order`, plus the end
    groups: Vec<usize>,
}

impl Ranked {
    fn new(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let mut groups = vec![0];
        for i in 1..order.len() {
            if scores[order[i]] != scores[order[i - 1]] {
                groups.push(i);
            }
        }
        groups.push(order.len());
        Ranked { order, groups }
    }

    /// AUC where sample `i` counts `weight[i]` times.
    fn weighted_auc(&self, labels: &[bool], weight: &[u32]) -> f64 {
        let mut neg_below = 0.0f64;
        let mut num = 0.0f64;
        let (mut tot_pos, mut tot_neg) = (0.0f64, 0.0f64);
        for g in self.groups.windows(2) {
            let (mut p, mut n) = (0.0f64, 0.0f64);
            for &i in &self.order[g[0]..g[1]] {
                if labels[i] {
                    p += weight[i] as f64;
                } else {
                    n += weight[i] as f64;
                }
            }
            num += p * (neg_below + 0.5 * n);
            neg_below += n;
            tot_pos += p;
            tot_neg += n;
        }
        num / (tot_pos * tot_neg)
    }

    /// ROC points of the weighted sample, highest threshold first.
    fn weighted_roc(&self, labels: &[bool], weight: &[u32]) -> Vec<(f64, f64)> {
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        let mut raw = vec![(0.0, 0.0)];
        for g in self.groups.windows(2).rev() {
            for &i in &self.order[g[0]..g[1]] {
                if labels[i] {
                    tp += weight[i] as f64;
                } else {
                    fp += weight[i] as f64;
                }
            }
            raw.push((fp, tp));
        }
        raw.into_iter().map(|(f, t)| (f / fp, t / tp)).collect()
    }
}

/// Mann-Whitney AUC; `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let ones = vec![1u32; scores.len()];
    Ok(Some(Ranked::new(scores).weighted_auc(labels, &ones)))
}

/// ROC curve from a sweep over distinct scores, highest threshold first.
/// Starts at (0,0) and ends at (1,1); tied scores move both rates at once.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Option<Vec<(f64, f64)>>> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let ranked = Ranked::new(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in ranked.groups.windows(2).rev() {
        for &i in &ranked.order[g[0]..g[1]] {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(Some(points))
}

/// Trapezoidal area under a polyline of (x, y) points.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bootstrap replicates of the AUC.
///
/// Draw order per replicate: `n_pos` indices into the positives (in their
/// original order), then `n_neg` indices into the negatives, each via
/// `random_range(0..len)` on a ChaCha8 generator seeded with `seed` on
/// stream `stream`.
pub fn bootstrap_aucs(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    seed: u64,
    stream: u64,
) -> Result<Option<Vec<f64>>> {
    check_inputs(scores, labels)?;
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Ok(None);
    }
    let ranked = Ranked::new(scores);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut weight = vec![0u32; scores.len()];
    let mut out = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        weight.fill(0);
        for _ in 0..positives.len() {
            weight[positives[rng.random_range(0..positives.len())]] += 1;
        }
        for _ in 0..negatives.len() {
            weight[negatives[rng.random_range(0..negatives.len())]] += 1;
        }
        out.push(ranked.weighted_auc(labels, &weight));
    }
    Ok(Some(out))
}

/// Pointwise 95% band of the ROC curve: TPR percentiles of the bootstrap
/// curves at `grid` evenly spaced false-positive rates from 0 to 1. Uses
/// the same draws as [`bootstrap_aucs`] for equal `seed` and `stream`.
pub fn roc_band(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    seed: u64,
    stream: u64,
    grid: usize,
) -> Result<Option<Vec<(f64, f64, f64)>>> {
    check_inputs(scores, labels)?;
    if grid < 2 {
        return Err(Error::invalid("band grid needs at least 2 points"));
    }
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if positives.is_empty() || negatives.is_empty() || n_boot == 0 {
        return Ok(None);
    }
    let ranked = Ranked::new(scores);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut weight = vec![0u32; scores.len()];
    let xs: Vec<f64> = (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect();
    let mut samples = vec![Vec::with_capacity(n_boot); grid];
    for _ in 0..n_boot {
        weight.fill(0);
        for _ in 0..positives.len() {
            weight[positives[rng.random_range(0..positives.len())]] += 1;
        }
        for _ in 0..negatives.len() {
            weight[negatives[rng.random_range(0..negatives.len())]] += 1;
        }
        let curve = ranked.weighted_roc(labels, &weight);
        for (x, s) in xs.iter().zip(samples.iter_mut()) {
            s.push(tpr_at(&curve, *x));
        }
    }
    Ok(Some(
        xs.into_iter()
            .zip(samples)
            .map(|(x, mut s)| {
                s.sort_by(f64::total_cmp);
                (x, percentile(&s, CI_LEVELS.0), percentile(&s, CI_LEVELS.1))
            })
            .collect(),
    ))
}

/// Highest TPR the piecewise-linear curve reaches at false-positive rate `x`.
fn tpr_at(curve: &[(f64, f64)], x: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x < x0 || x > x1 {
            continue;
        }
        let y = if x1 > x0 { y0 + (y1 - y0) * (x - x0) / (x1 - x0) } else { y1 };
        best = best.max(y);
    }
    best
}

/// 95% stratified percentile bootstrap interval.
pub fn auc_ci(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    seed: u64,
) -> Result<Option<(f64, f64)>> {
    auc_ci_stream(scores, labels, n_boot, seed, 0)
}

pub fn auc_ci_stream(
    scores: &[f64],
    labels: &[bool],
    n_boot: usize,
    seed: u64,
    stream: u64,
) -> Result<Option<(f64, f64)>> {
    if n_boot < MIN_BOOTSTRAP {
        return Err(Error::invalid(format!(
            "n_boot must be at least {MIN_BOOTSTRAP}, got {n_boot}"
        )));
    }
    Ok(bootstrap_aucs(scores, labels, n_boot, seed, stream)?.map(|mut v| {
        v.sort_by(f64::total_cmp);
        (percentile(&v, CI_LEVELS.0), percentile(&v, CI_LEVELS.1))
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocResult {
    pub node: NodeId,
    pub support_pos: usize,
    pub support_neg: usize,
    /// `None` when the node lacks positives or negatives.
    pub auc: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub points: Vec<(f64, f64)>,
    /// pointwise bootstrap band `(fpr, tpr_low, tpr_high)`
    pub band: Option<Vec<(f64, f64, f64)>>,
}

impl RocResult {
    pub fn is_defined(&self) -> bool {
        self.auc.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// bootstrap replicates; 0 skips intervals
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_boot: DEFAULT_BOOTSTRAP,
            seed: 0,
        }
    }
}

/// Full ROC analysis of one score column. The bootstrap stream is the
/// node's column index so every node gets its own reproducible draws.
pub fn roc_result(
    node: NodeId,
    scores: &[f64],
    labels: &[bool],
    opts: &EvalOptions,
    stream: u64,
) -> Result<RocResult> {
    let (support_pos, support_neg) = class_counts(labels);
    let auc_v = auc(scores, labels)?;
    let (ci, band) = if auc_v.is_some() && opts.n_boot > 0 {
        (
            auc_ci_stream(scores, labels, opts.n_boot, opts.seed, stream)?,
            roc_band(scores, labels, opts.n_boot, opts.seed, stream, BAND_GRID)?,
        )
    } else {
        (None, None)
    };
    Ok(RocResult {
        node,
        support_pos,
        support_neg,
        auc: auc_v,
        ci,
        points: roc_points(scores, labels)?.unwrap_or_default(),
        band,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub per_node: Vec<RocResult>,
    /// mean AUC over defined nodes
    pub avg_auc: Option<f64>,
    /// population standard deviation over defined nodes
    pub avg_auc_std: Option<f64>,
    pub n_defined: usize,
}

impl EvaluationReport {
    pub fn from_results(per_node: Vec<RocResult>) -> Self {
        let aucs: Vec<f64> = per_node.iter().filter_map(|r| r.auc).collect();
        let (avg, std) = if aucs.is_empty() {
            (None, None)
        } else {
            let n = aucs.len() as f64;
            let mean = aucs.iter().sum::<f64>() / n;
            let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        EvaluationReport {
            n_defined: aucs.len(),
            per_node,
            avg_auc: avg,
            avg_auc_std: std,
        }
    }

    pub fn get(&self, node: &NodeId) -> Option<&RocResult> {
        self.per_node.iter().find(|r| &r.node == node)
    }

    /// CSV `node_id,name,support_pos,support_neg,auc,ci_low,ci_high`; empty
    /// fields for undefined values. A trailing `# avg_auc=...` line summarizes.
    pub fn write_csv<W: Write>(&self, taxonomy: &Taxonomy, mut w: W) -> Result<()> {
        writeln!(w, "node_id,name,support_pos,support_neg,auc,ci_low,ci_high")?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.per_node {
            let name = taxonomy.get(&r.node).map(|n| n.name.as_str()).unwrap_or("");
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.node,
                csv_field(name),
                r.support_pos,
                r.support_neg,
                fmt(r.auc),
                fmt(r.ci.map(|c| c.0)),
                fmt(r.ci.map(|c| c.1)),
            )?;
        }
        writeln!(w, "{}", self.summary())?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        match (self.avg_auc, self.avg_auc_std) {
            (Some(m), Some(s)) => format!(
                "# avg_auc={m:.6} std={s:.6} nodes={} undefined={}",
                self.n_defined,
                self.per_node.len() - self.n_defined
            ),
            _ => format!("# avg_auc=undefined nodes=0 undefined={}", self.per_node.len()),
        }
    }

    pub fn save_csv(&self, taxonomy: &Taxonomy, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(taxonomy, f)
    }

    /// One `<node_id>.csv` of `fpr,tpr` rows per defined node.
    pub fn write_roc_points(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for r in self.per_node.iter().filter(|r| r.is_defined()) {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}.csv", r.node)))?);
            writeln!(f, "fpr,tpr")?;
            for (x, y) in &r.points {
                writeln!(f, "{x:.6},{y:.6}")?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Ground-truth label sets for each prediction row, in row order.
fn truth_rows<'a>(
    predictions: &PredictionMatrix,
    truth: &'a HashMap<String, LabelSet>,
) -> Result<Vec<&'a LabelSet>> {
    predictions
        .image_ids()
        .iter()
        .map(|id| {
            truth
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no labels for predicted image {id}")))
        })
        .collect()
}

/// Binary evaluation targets for every prediction row and taxonomy column.
fn evaluation_matrix(
    taxonomy: &Taxonomy,
    predictions: &PredictionMatrix,
    truth: &HashMap<String, LabelSet>,
) -> Result<Vec<Vec<bool>>> {
    // descendant-closed positivity equals the ancestor-closed propagated bit
    truth_rows(predictions, truth)?
        .into_iter()
        .map(|ls| {
            let t = propagate(taxonomy, ls)?;
            predictions
                .columns()
                .iter()
                .map(|c| taxonomy.require_index(c).map(|i| t.get(i)))
                .collect()
        })
        .collect()
}

/// One-vs-all ROC analysis for every prediction column.
pub fn per_label_report(
    taxonomy: &Taxonomy,
    predictions: &PredictionMatrix,
    truth: &HashMap<String, LabelSet>,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    predictions.check_alignment(taxonomy)?;
    let targets = evaluation_matrix(taxonomy, predictions, truth)?;
    let results: Result<Vec<RocResult>> = (0..predictions.n_cols())
        .into_par_iter()
        .map(|c| {
            let labels: Vec<bool> = targets.iter().map(|row| row[c]).collect();
            roc_result(
                predictions.columns()[c].clone(),
                &predictions.column(c),
                &labels,
                opts,
                c as u64,
            )
        })
        .collect();
    Ok(EvaluationReport::from_results(results?))
}

/// ROC of `target` restricted to images positive for `filter`.
pub fn subset_eval(
    taxonomy: &Taxonomy,
    predictions: &PredictionMatrix,
    truth: &HashMap<String, LabelSet>,
    filter: &NodeId,
    target: &NodeId,
    opts: &EvalOptions,
) -> Result<RocResult> {
    let fi = taxonomy.require_index(filter)?;
    let ti = taxonomy.require_index(target)?;
    let col = predictions
        .column_of(target)
        .ok_or_else(|| Error::invalid(format!("predictions have no column {target}")))?;
    let rows = truth_rows(predictions, truth)?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (r, ls) in rows.into_iter().enumerate() {
        let t = propagate(taxonomy, ls)?;
        if t.get(fi) {
            scores.push(predictions.get(r, col));
            labels.push(t.get(ti));
        }
    }
    let res = roc_result(target.clone(), &scores, &labels, opts, ti as u64)?;
    if !res.is_defined() {
        return Err(Error::Undefined(format!(
            "subset {filter} has {} positives and {} negatives for {target}",
            res.support_pos, res.support_neg
        )));
    }
    Ok(res)
}
