//! Incremental-session machinery: confident-sample selection, k-means, cluster-guided
//! classifier expansion, and matching of novel clusters to free frame columns.

use crate::assignment::solve_min_lexicographic;
use crate::error::{Error, Result};
use crate::etf::{AllocationLedger, EtfFrame};
use crate::numkit::{cosine, entropy, normalize_rows, normalized, squared_distance, Matrix, Rng};

/// The lowest-entropy `α` fraction of a prediction set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentSubset {
    /// Selected sample indices in ascending order.
    pub indices: Vec<usize>,
    /// Prediction entropy (nats) of every input row.
    pub entropies: Vec<f64>,
    pub alpha: f64,
}

impl ConfidentSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.indices.is_empty() {
            return 0.0;
        }
        self.indices.iter().map(|&i| self.entropies[i]).sum::<f64>() / self.indices.len() as f64
    }
}

/// Number of samples kept for a fraction `alpha` of `n`: `⌊α·n⌋`, but at least one.
pub fn confident_count(n: usize, alpha: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((alpha * n as f64).floor() as usize).clamp(1, n)
}

/// Ranks rows by prediction entropy (ties by ascending index) and keeps the lowest `⌊α·N⌋`.
pub fn select_confident(probabilities: &Matrix, alpha: f64) -> Result<ConfidentSubset> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Argument(format!("alpha = {alpha} must lie in (0, 1]")));
    }
    let n = probabilities.rows();
    if n == 0 {
        return Err(Error::Empty("no predictions to rank".into()));
    }
    let entropies: Vec<f64> = probabilities.row_iter().map(entropy).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    let mut indices = order[..confident_count(n, alpha)].to_vec();
    indices.sort_unstable();
    Ok(ConfidentSubset {
        indices,
        entropies,
        alpha,
    })
}

/// k-means output. Centers are unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after initialization and after every accepted Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    /// Index of the closest center; the lowest index wins ties.
    pub fn nearest(&self, point: &[f64]) -> usize {
        nearest_center(point, &self.centers).0
    }
}

fn nearest_center(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = squared_distance(point, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(points: &Matrix, centers: &Matrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .row_iter()
        .map(|p| {
            let (c, d) = nearest_center(p, centers);
            inertia += d;
            c
        })
        .collect();
    (assignment, inertia)
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut closest: Vec<f64> = points
        .row_iter()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a chosen center
            rng.below(n)
        };
        chosen.push(next);
        for (i, p) in points.row_iter().enumerate() {
            closest[i] = closest[i].min(squared_distance(p, points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Lloyd's algorithm from k-means++ seeding over row-normalized points.
///
/// Iteration stops when the inertia no longer strictly decreases or after `max_iters`
/// updates, so the recorded inertia trace is non-increasing.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<ClusterResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Degenerate(format!("{n} points cannot form {k} clusters")));
    }
    let (unit, _) = normalize_rows(points)?;
    let centers = plus_plus_init(&unit, k, &mut Rng::new(seed));
    Ok(lloyd(&unit, centers, max_iters))
}

/// Best of `restarts` independent [`kmeans`] runs by final inertia; the earliest run wins ties.
pub fn kmeans_restarts(
    points: &Matrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<ClusterResult> {
    let root = Rng::new(seed);
    let mut best: Option<ClusterResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, k, root.fork(r as u64).next_u64(), max_iters)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Lloyd's algorithm started from the given centers, so cluster `c` of the result
/// continues center `c` of `init`.
pub fn kmeans_from(points: &Matrix, init: &Matrix, max_iters: usize) -> Result<ClusterResult> {
    if init.rows() == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if points.rows() == 0 {
        return Err(Error::Empty("k-means input".into()));
    }
    if init.cols() != points.cols() {
        return Err(Error::Dimension(format!(
            "centers of dim {} for points of dim {}",
            init.cols(),
            points.cols()
        )));
    }
    let (unit, _) = normalize_rows(points)?;
    Ok(lloyd(&unit, init.clone(), max_iters))
}

fn lloyd(unit: &Matrix, mut centers: Matrix, max_iters: usize) -> ClusterResult {
    let (k, d) = centers.shape();
    let (mut assignment, mut inertia) = assign_all(unit, &centers);
    let mut trace = vec![inertia];

    for _ in 0..max_iters {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(unit.row(i)) {
                *s += x;
            }
        }
        let mut next = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let (next_assignment, next_inertia) = assign_all(unit, &next);
        if next_inertia >= inertia {
            break;
        }
        centers = next;
        assignment = next_assignment;
        inertia = next_inertia;
        trace.push(inertia);
    }

    let mut unit_centers = Matrix::zeros(k, d);
    for c in 0..k {
        let dir = normalized(centers.row(c))
            .or_else(|| assignment.iter().position(|&a| a == c).map(|i| unit.row(i).to_vec()))
            .unwrap_or_else(|| centers.row(c).to_vec());
        unit_centers.row_mut(c).copy_from_slice(&dir);
    }
    ClusterResult {
        centers: unit_centers,
        assignment,
        inertia,
        inertia_trace: trace,
    }
}

/// Maximum cosine similarity of each center to the columns of `weights`; `−∞` when there
/// are no columns.
pub fn novelty_scores(centers: &Matrix, weights: &Matrix) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = (0..weights.cols()).map(|c| weights.col(c)).collect();
    centers
        .row_iter()
        .map(|c| cols.iter().map(|w| cosine(c, w)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Indices of the `c_new` centers least similar to any existing classifier column, in
/// selection order (ascending score, ties by ascending index).
pub fn select_novel_centers(centers: &ClusterResult, weights: &Matrix, c_new: usize) -> Result<Vec<usize>> {
    if centers.k() < c_new {
        return Err(Error::Capacity {
            requested: c_new,
            available: centers.k(),
        });
    }
    let scores = novelty_scores(&centers.centers, weights);
    let mut order: Vec<usize> = (0..centers.k()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(c_new);
    Ok(order)
}

/// `[W_old, selected centers]`: appends the `c_new` most novel centers as new columns.
pub fn expand_classifier(w_old: &Matrix, centers: &ClusterResult, c_new: usize) -> Result<Matrix> {
    if c_new == 0 {
        return Ok(w_old.clone());
    }
    if centers.centers.cols() != w_old.rows() && w_old.cols() > 0 {
        return Err(Error::Dimension(format!(
            "centers of dim {} cannot extend a classifier of dim {}",
            centers.centers.cols(),
            w_old.rows()
        )));
    }
    let picked = select_novel_centers(centers, w_old, c_new)?;
    let new_cols = centers.centers.select_rows(&picked).transpose();
    if w_old.cols() == 0 {
        return Ok(new_cols);
    }
    w_old.hcat(&new_cols)
}

/// Injective map from clusters to free frame columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatch {
    /// `phi[c]` is the frame column matched to cluster `c`.
    pub phi: Vec<usize>,
    /// Total cosine similarity of the matching.
    pub objective: f64,
}

/// Matches centroids to free prototypes maximizing total cosine similarity (Hungarian on
/// `1 − cos`), breaking ties toward the lexicographically smallest column vector.
pub fn match_prototypes(centroids: &Matrix, frame: &EtfFrame, ledger: &AllocationLedger) -> Result<PrototypeMatch> {
    let free = ledger.free();
    let k = centroids.rows();
    if k > free.len() {
        return Err(Error::Capacity {
            requested: k,
            available: free.len(),
        });
    }
    if k == 0 {
        return Ok(PrototypeMatch {
            phi: Vec::new(),
            objective: 0.0,
        });
    }
    if centroids.cols() != frame.dim() {
        return Err(Error::Dimension(format!(
            "centroid dim {} does not match frame dim {}",
            centroids.cols(),
            frame.dim()
        )));
    }
    let protos = frame.prototype_rows();
    let mut sim = Matrix::zeros(k, free.len());
    for i in 0..k {
        for (j, &col) in free.iter().enumerate() {
            sim[(i, j)] = cosine(centroids.row(i), protos.row(col));
        }
    }
    let solution = solve_min_lexicographic(&sim.map(|s| 1.0 - s))?;
    let phi: Vec<usize> = solution.row_to_col.iter().map(|&j| free[j]).collect();
    let objective = solution.row_to_col.iter().enumerate().map(|(i, &j)| sim[(i, j)]).sum();
    Ok(PrototypeMatch { phi, objective })
}

/// Frame column each confident sample aligns to.
///
/// `pseudo_labels` and `cluster_assignment` are aligned with `subset.indices`. Samples whose
/// pseudo-label is below `old_classes` go to their class's ledger column; the rest go to the
/// column matched to their cluster.
pub fn route_alignment_targets(
    subset: &ConfidentSubset,
    pseudo_labels: &[usize],
    old_classes: usize,
    ledger: &AllocationLedger,
    matched: &PrototypeMatch,
    cluster_assignment: &[usize],
) -> Result<Vec<usize>> {
    let m = subset.indices.len();
    if pseudo_labels.len() != m || cluster_assignment.len() != m {
        return Err(Error::Inconsistent(format!(
            "{m} confident samples but {} pseudo-labels and {} cluster ids",
            pseudo_labels.len(),
            cluster_assignment.len()
        )));
    }
    pseudo_labels
        .iter()
        .zip(cluster_assignment)
        .map(|(&label, &cluster)| {
            if label < old_classes {
                ledger.require(label)
            } else {
                matched.phi.get(cluster).copied().ok_or_else(|| {
                    Error::Inconsistent(format!(
                        "cluster {cluster} has no matched prototype ({} matched)",
                        matched.phi.len()
                    ))
                })
            }
        })
        .collect()
}
