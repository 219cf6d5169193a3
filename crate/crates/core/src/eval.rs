//! Protocol metrics: Hungarian-matched accuracy, forgetting and discovery rates, and
//! neural-collapse diagnostics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::assignment::solve_max;
use crate::error::{Error, Result};
use crate::etf::{ideal_gram, AllocationLedger, EtfFrame};
use crate::numkit::{argmax, cosine, dot, normalized, squared_distance, Matrix};

/// Accuracies in percent over all samples, samples of old classes, and samples of new classes.
/// A subset with no samples reports 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTriple {
    pub all: f64,
    pub old: f64,
    pub new: f64,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Relabels predicted cluster ids through the count-maximizing one-to-one map onto truth ids
/// (zero-padded to a square problem) and scores all / old / new subsets under that one map.
///
/// Among maps with the same total agreement, the one with the most old-class hits wins, so the
/// triple does not depend on how clusters are numbered.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize], old_set: &BTreeSet<usize>) -> Result<AccuracyTriple> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mapping = label_map(pred, truth, |t| old_set.contains(&t))?;
    let (mut hits_all, mut hits_old, mut hits_new, mut n_old, mut n_new) = (0, 0, 0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        let hit = mapping.get(p) == Some(t);
        hits_all += usize::from(hit);
        if old_set.contains(t) {
            n_old += 1;
            hits_old += usize::from(hit);
        } else {
            n_new += 1;
            hits_new += usize::from(hit);
        }
    }
    let n_all = truth.len();
    Ok(AccuracyTriple {
        all: pct(hits_all, n_all),
        old: pct(hits_old, n_old),
        new: pct(hits_new, n_new),
        n_all,
        n_old,
        n_new,
    })
}

/// The one-to-one map from predicted ids to truth ids maximizing agreement.
pub fn best_label_map(pred: &[usize], truth: &[usize]) -> Result<BTreeMap<usize, usize>> {
    label_map(pred, truth, |_| false)
}

/// Maximizes agreement, then agreement on truth ids flagged by `preferred`.
fn label_map(pred: &[usize], truth: &[usize], preferred: impl Fn(usize) -> bool) -> Result<BTreeMap<usize, usize>> {
    let pred_ids: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let truth_ids: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let size = pred_ids.len().max(truth_ids.len());
    if size == 0 {
        return Ok(BTreeMap::new());
    }
    let p_index: BTreeMap<usize, usize> = pred_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let t_index: BTreeMap<usize, usize> = truth_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    // each hit is worth more than all possible preferred hits together, so ties alone are reordered
    let hit = (pred.len() + 1) as f64;
    let mut counts = Matrix::zeros(size, size);
    for (p, t) in pred.iter().zip(truth) {
        counts[(p_index[p], t_index[t])] += if preferred(*t) { hit + 1.0 } else { hit };
    }
    let solution = solve_max(&counts)?;
    Ok(solution
        .row_to_col
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < pred_ids.len() && j < truth_ids.len())
        .map(|(i, &j)| (pred_ids[i], truth_ids[j]))
        .collect())
}

/// Stage-0 overall accuracy minus old-class accuracy at the final incremental stage.
pub fn forgetting_rate(incremental: &[AccuracyTriple], stage0_all: f64) -> Result<f64> {
    let last = incremental
        .last()
        .ok_or_else(|| Error::MissingStage("forgetting rate needs an incremental stage".into()))?;
    Ok(stage0_all - last.old)
}

/// Mean new-class accuracy over the incremental stages.
pub fn discovery_rate(incremental: &[AccuracyTriple]) -> Result<f64> {
    if incremental.is_empty() {
        return Err(Error::MissingStage("discovery rate needs an incremental stage".into()));
    }
    Ok(incremental.iter().map(|r| r.new).sum::<f64>() / incremental.len() as f64)
}

/// Neural-collapse snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcDiagnostics {
    /// `tr(Σ_W) / tr(Σ_B)`.
    pub nc1: f64,
    /// Max deviation of the centered, normalized class-mean Gram from the ideal simplex Gram.
    pub nc2: f64,
    /// Mean cosine between centered class means and their assigned prototypes.
    pub nc3: f64,
    /// Fraction of samples on which nearest-class-mean and the linear head agree.
    pub nc4: f64,
}

struct ClassStats {
    classes: Vec<usize>,
    means: Matrix,
    global: Vec<f64>,
}

fn class_stats(embeddings: &Matrix, labels: &[usize]) -> Result<ClassStats> {
    let (n, d) = embeddings.shape();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut means = Matrix::zeros(classes.len(), d);
    let mut counts = vec![0usize; classes.len()];
    let mut global = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        let k = index[&y];
        counts[k] += 1;
        for (m, &x) in means.row_mut(k).iter_mut().zip(embeddings.row(i)) {
            *m += x;
        }
        for (g, &x) in global.iter_mut().zip(embeddings.row(i)) {
            *g += x;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        for m in means.row_mut(k) {
            *m /= c as f64;
        }
    }
    for g in &mut global {
        *g /= n as f64;
    }
    Ok(ClassStats { classes, means, global })
}

/// `Σ_W = Avg_i (x_i − μ_{y_i})(x_i − μ_{y_i})ᵀ` over all samples.
pub fn within_class_scatter(embeddings: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let stats = class_stats(embeddings, labels)?;
    let index: BTreeMap<usize, usize> = stats.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let d = embeddings.cols();
    let mut sw = Matrix::zeros(d, d);
    for (i, &y) in labels.iter().enumerate() {
        let mu = stats.means.row(index[&y]);
        let diff: Vec<f64> = embeddings.row(i).iter().zip(mu).map(|(x, m)| x - m).collect();
        for a in 0..d {
            for b in 0..d {
                sw[(a, b)] += diff[a] * diff[b];
            }
        }
    }
    Ok(sw.scaled(1.0 / embeddings.rows() as f64))
}

/// Collapse diagnostics for `embeddings` labelled by model class ids. `weights` holds one
/// column per class id and `ledger` maps class ids to frame columns.
pub fn nc_diagnostics(
    embeddings: &Matrix,
    labels: &[usize],
    frame: &EtfFrame,
    ledger: &AllocationLedger,
    weights: &Matrix,
) -> Result<NcDiagnostics> {
    let stats = class_stats(embeddings, labels)?;
    let c = stats.classes.len();
    if c < 2 {
        return Err(Error::Degenerate("need at least 2 classes".into()));
    }
    for &cls in &stats.classes {
        if labels.iter().filter(|&&y| y == cls).count() < 2 {
            return Err(Error::Degenerate(format!("class {cls} has fewer than 2 samples")));
        }
    }

    let within = within_class_scatter(embeddings, labels)?;
    let tr_w: f64 = (0..within.rows()).map(|i| within[(i, i)]).sum();
    let centered: Vec<Vec<f64>> = stats
        .means
        .row_iter()
        .map(|m| m.iter().zip(&stats.global).map(|(a, g)| a - g).collect())
        .collect();
    let tr_b = centered.iter().map(|v| dot(v, v)).sum::<f64>() / c as f64;
    let nc1 = if tr_b > 0.0 { tr_w / tr_b } else { f64::INFINITY };

    let unit: Vec<Vec<f64>> = centered
        .iter()
        .map(|v| normalized(v).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();
    let ideal = ideal_gram(c)?;
    let mut nc2 = 0.0f64;
    for i in 0..c {
        for j in 0..c {
            nc2 = nc2.max((dot(&unit[i], &unit[j]) - ideal[(i, j)]).abs());
        }
    }

    let mut nc3 = 0.0;
    for (k, &cls) in stats.classes.iter().enumerate() {
        let col = ledger.require(cls)?;
        nc3 += cosine(&centered[k], &frame.prototype(col));
    }
    nc3 /= c as f64;

    let head = embeddings.matmul(weights)?;
    let mut agree = 0usize;
    for i in 0..embeddings.rows() {
        let mut best = (0, f64::INFINITY);
        for (k, m) in stats.means.row_iter().enumerate() {
            let d = squared_distance(embeddings.row(i), m);
            if d < best.1 {
                best = (k, d);
            }
        }
        agree += usize::from(argmax(head.row(i)) == stats.classes[best.0]);
    }
    let nc4 = agree as f64 / embeddings.rows() as f64;

    Ok(NcDiagnostics { nc1, nc2, nc3, nc4 })
}
