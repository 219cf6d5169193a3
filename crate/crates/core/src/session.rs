//! The continual discovery protocol: a supervised base session followed by unsupervised
//! incremental sessions, all anchored to one fixed simplex frame.
//!
//! Model class ids are classifier column indices. Base classes take columns in ascending
//! true-label order; each incremental session appends its new columns in the order chosen by
//! [`expand_classifier`]. The allocation ledger is keyed by the same ids.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::assignment::solve_min_lexicographic;
use crate::data::{Split, StageData};
use crate::discovery::{
    expand_classifier, kmeans_from, kmeans_restarts, match_prototypes, route_alignment_targets, select_confident,
    ConfidentSubset, PrototypeMatch,
};
use crate::encoder::{momentum_update, Activation, Encoder, ForwardCache, SgdConfig, Velocity};
use crate::error::{Error, Result};
use crate::etf::{AllocationLedger, EtfFrame};
use crate::eval::{
    best_label_map, discovery_rate, forgetting_rate, hungarian_accuracy, nc_diagnostics, AccuracyTriple, NcDiagnostics,
};
use crate::losses::{
    base_rep, base_total, cls_cross_entropy, incremental_total, supervised_alignment, unsup_alignment, unsup_cls,
    unsup_contrastive, LossConfig, LossResult,
};
use crate::numkit::{argmax, normalize_rows, normalize_rows_backward, softmax, Matrix, Rng};

/// Named training budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Short schedule for quick synthetic runs.
    Desk,
    /// Base 100 / incremental 30 epochs.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub loss: LossConfig,
    pub base_sgd: SgdConfig,
    pub incremental_sgd: SgdConfig,
    /// Fraction of unlabeled samples kept for alignment, ranked by prediction entropy.
    pub alpha: f64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Number of frame prototypes; `None` uses the number of classes in the stream.
    pub frame_count: Option<usize>,
    /// Frame seed; `None` derives it from `seed`.
    pub frame_seed: Option<u64>,
    /// Standard deviation of the additive noise that makes the two views in the base session.
    pub base_aug_sigma: f64,
    /// View noise in incremental sessions.
    pub incremental_aug_sigma: f64,
    /// Student logits are `Wᵀê / cls_temp` with unit-norm classifier columns.
    pub cls_temp: f64,
    pub sup_etf_align: bool,
    pub unsup_etf_align: bool,
    /// Cluster the whole confident set and align every confident sample to a free prototype.
    pub literal_unassigned_only: bool,
    /// Stop gradient flow into classifier columns of earlier sessions.
    pub freeze_old_weights: bool,
    pub kmeans_iters: usize,
    /// Independent k-means runs for classifier expansion; the lowest inertia wins.
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl SessionConfig {
    pub fn preset(preset: Preset) -> Self {
        let (base_epochs, inc_epochs) = match preset {
            Preset::Desk => (30, 10),
            Preset::Paper => (100, 30),
        };
        let sgd = |learning_rate, epochs| SgdConfig {
            learning_rate,
            momentum: 0.9,
            batch_size: 64,
            epochs,
        };
        Self {
            loss: LossConfig::default(),
            base_sgd: sgd(0.1, base_epochs),
            incremental_sgd: sgd(0.02, inc_epochs),
            alpha: 0.7,
            hidden_dims: vec![64],
            embed_dim: 32,
            frame_count: None,
            frame_seed: None,
            base_aug_sigma: 0.12,
            incremental_aug_sigma: 0.08,
            cls_temp: 0.1,
            sup_etf_align: true,
            unsup_etf_align: true,
            literal_unassigned_only: false,
            freeze_old_weights: false,
            kmeans_iters: 100,
            kmeans_restarts: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.base_sgd.validate()?;
        self.incremental_sgd.validate()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Argument(format!("alpha = {} must lie in (0, 1]", self.alpha)));
        }
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Argument("layer widths must be positive".into()));
        }
        for (name, v) in [
            ("base_aug_sigma", self.base_aug_sigma),
            ("incremental_aug_sigma", self.incremental_aug_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Argument(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(self.cls_temp > 0.0) {
            return Err(Error::Argument(format!(
                "cls_temp = {} must be positive",
                self.cls_temp
            )));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::Argument("kmeans_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss components over one epoch's mini-batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub align: f64,
    pub rep: f64,
    pub cls: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub size: usize,
    pub mean_entropy: f64,
}

/// Collapse diagnostics at one point of training. Epoch 0 is before any update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcCheckpoint {
    pub stage: usize,
    pub epoch: usize,
    pub nc: NcDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub t: usize,
    pub acc_all: f64,
    pub acc_old: f64,
    /// Absent at stage 0, where every class is old.
    pub acc_new: Option<f64>,
    pub accuracy: AccuracyTriple,
    pub loss_trace: Vec<EpochLoss>,
    /// Diagnostics on the stage's test split, when every class there is non-degenerate.
    pub nc_diag: Option<NcDiagnostics>,
    /// Base session: training-set diagnostics per epoch. Incremental: the end-of-stage test value.
    pub nc_trace: Vec<NcCheckpoint>,
    pub selection_stats: Option<SelectionStats>,
}

/// Protocol state between sessions.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub t: usize,
    /// Model class ids known before the current stage.
    pub classes_old: BTreeSet<usize>,
    /// Model class ids added by the current stage.
    pub classes_new: BTreeSet<usize>,
    /// `d × |C^t|`, unit-norm columns indexed by model class id.
    pub weights: Matrix,
    pub ledger: AllocationLedger,
    pub encoder: Encoder,
    pub frame: EtfFrame,
    pub config: SessionConfig,
    pub rng: Rng,
    /// True base label → model class id.
    pub base_labels: BTreeMap<usize, usize>,
}

impl SessionState {
    pub fn new(config: SessionConfig, input_dim: usize, frame_count: usize) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed);
        let frame_seed = config.frame_seed.unwrap_or_else(|| rng.fork(0).next_u64());
        let frame = EtfFrame::build(config.embed_dim, frame_count, frame_seed)?;
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.embed_dim);
        let encoder = Encoder::new(&dims, Activation::default(), &mut rng.fork(1))?;
        Ok(Self {
            t: 0,
            classes_old: BTreeSet::new(),
            classes_new: BTreeSet::new(),
            weights: Matrix::zeros(config.embed_dim, 0),
            ledger: AllocationLedger::new(frame_count),
            encoder,
            frame,
            config,
            rng,
            base_labels: BTreeMap::new(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.weights.cols()
    }

    /// Row-normalized embeddings of `inputs`.
    pub fn embed_unit(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(normalize_rows(&self.encoder.embed(inputs)?)?.0)
    }

    /// Predicted model class ids.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.embed_unit(inputs)?.matmul(&self.weights)?;
        Ok(logits.row_iter().map(argmax).collect())
    }
}

struct Views {
    cache_a: ForwardCache,
    cache_b: ForwardCache,
    raw_a: Matrix,
    unit_a: Matrix,
    norms_a: Vec<f64>,
    unit_b: Matrix,
    norms_b: Vec<f64>,
}

fn augment(x: &Matrix, sigma: f64, rng: &mut Rng) -> Matrix {
    let mut out = x.clone();
    if sigma > 0.0 {
        for v in out.as_mut_slice() {
            *v += sigma * rng.gaussian();
        }
    }
    out
}

fn two_views(encoder: &Encoder, x: &Matrix, sigma: f64, rng: &mut Rng) -> Result<Views> {
    let xa = augment(x, sigma, rng);
    let xb = augment(x, sigma, rng);
    let (raw_a, cache_a) = encoder.forward(&xa)?;
    let (raw_b, cache_b) = encoder.forward(&xb)?;
    let (unit_a, norms_a) = normalize_rows(&raw_a)?;
    let (unit_b, norms_b) = normalize_rows(&raw_b)?;
    Ok(Views {
        cache_a,
        cache_b,
        raw_a,
        unit_a,
        norms_a,
        unit_b,
        norms_b,
    })
}

/// Backpropagates raw-embedding gradients of both views and takes one encoder step.
fn encoder_step(
    state: &mut SessionState,
    views: &Views,
    g_a: &Matrix,
    g_b: &Matrix,
    sgd: &SgdConfig,
    vel: &mut Velocity,
) -> Result<()> {
    let (mut grads, _) = state.encoder.backward(&views.cache_a, g_a)?;
    let (grads_b, _) = state.encoder.backward(&views.cache_b, g_b)?;
    grads.add_assign(&grads_b)?;
    state.encoder.sgd_step(&grads, sgd, vel)
}

/// Momentum step on the classifier followed by projection of every column to unit length.
fn classifier_step(weights: &mut Matrix, grad: &Matrix, vel: &mut Matrix, sgd: &SgdConfig, frozen: usize) {
    let mut grad = grad.clone();
    if frozen > 0 {
        for r in 0..grad.rows() {
            grad.row_mut(r)[..frozen].iter_mut().for_each(|g| *g = 0.0);
        }
    }
    momentum_update(
        weights.as_mut_slice(),
        grad.as_slice(),
        vel.as_mut_slice(),
        sgd.learning_rate,
        sgd.momentum,
    );
    normalize_columns(weights);
}

fn normalize_columns(weights: &mut Matrix) {
    for c in 0..weights.cols() {
        let n = weights.col(c).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for r in 0..weights.rows() {
                weights[(r, c)] /= n;
            }
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

#[derive(Default)]
struct LossMeter {
    steps: usize,
    total: f64,
    align: f64,
    rep: f64,
    cls: f64,
}

impl LossMeter {
    fn add(&mut self, total: f64, align: f64, rep: f64, cls: f64) {
        self.steps += 1;
        self.total += total;
        self.align += align;
        self.rep += rep;
        self.cls += cls;
    }

    fn finish(&self, epoch: usize) -> EpochLoss {
        let n = self.steps.max(1) as f64;
        EpochLoss {
            epoch,
            total: self.total / n,
            align: self.align / n,
            rep: self.rep / n,
            cls: self.cls / n,
        }
    }
}

/// Diagnostics with `labels` already expressed as model class ids.
fn diagnostics(state: &SessionState, inputs: &Matrix, labels: &[usize]) -> Result<Option<NcDiagnostics>> {
    let unit = state.embed_unit(inputs)?;
    match nc_diagnostics(&unit, labels, &state.frame, &state.ledger, &state.weights) {
        Ok(nc) => Ok(Some(nc)),
        Err(Error::Degenerate(_)) | Err(Error::UnassignedClass(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Hungarian-matched accuracy on `split` and diagnostics under the same matching.
fn evaluate(
    state: &SessionState,
    split: &Split,
    old: &BTreeSet<usize>,
) -> Result<(AccuracyTriple, Option<NcDiagnostics>)> {
    if split.is_empty() {
        return Err(Error::Empty(format!("stage {} test split", state.t)));
    }
    let pred = state.predict(&split.inputs)?;
    let acc = hungarian_accuracy(&pred, &split.labels, old)?;
    let truth_to_model: BTreeMap<usize, usize> = best_label_map(&pred, &split.labels)?
        .into_iter()
        .filter(|&(p, _)| p < state.class_count())
        .map(|(p, t)| (t, p))
        .collect();
    let rows: Vec<usize> = (0..split.len())
        .filter(|&i| truth_to_model.contains_key(&split.labels[i]))
        .collect();
    let labels: Vec<usize> = rows.iter().map(|&i| truth_to_model[&split.labels[i]]).collect();
    let nc = if rows.is_empty() {
        None
    } else {
        diagnostics(state, &split.inputs.select_rows(&rows), &labels)?
    };
    Ok((acc, nc))
}

fn report(t: usize, acc: AccuracyTriple, loss_trace: Vec<EpochLoss>, nc_diag: Option<NcDiagnostics>) -> StageReport {
    StageReport {
        t,
        acc_all: acc.all,
        acc_old: acc.old,
        acc_new: (t > 0).then_some(acc.new),
        accuracy: acc,
        loss_trace,
        nc_diag,
        nc_trace: Vec::new(),
        selection_stats: None,
    }
}

/// Supervised base session on stage-0 data.
pub fn run_base(mut state: SessionState, stage: &StageData) -> Result<(SessionState, StageReport)> {
    if stage.stage != 0 {
        return Err(Error::Argument(format!(
            "base session needs stage 0, got {}",
            stage.stage
        )));
    }
    let mut base: Vec<usize> = stage.classes_new.clone();
    base.sort_unstable();
    base.dedup();
    let c = base.len();
    if c > state.ledger.free_count() {
        return Err(Error::Capacity {
            requested: c,
            available: state.ledger.free_count(),
        });
    }
    state.base_labels = base.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    let map_labels = |labels: &[usize]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|y| {
                state
                    .base_labels
                    .get(y)
                    .copied()
                    .ok_or(Error::LabelOutOfRange { label: *y, classes: c })
            })
            .collect()
    };
    let labels = map_labels(&stage.train.labels)?;
    if stage.train.is_empty() {
        return Err(Error::Empty("stage 0 training split".into()));
    }

    state.t = 0;
    state.classes_old.clear();
    state.classes_new = (0..c).collect();
    for class in 0..c {
        state.ledger.assign(class)?;
    }
    let mut rng = state.rng.fork(100);
    let d = state.config.embed_dim;
    state.weights = Matrix::from_vec(d, c, rng.gaussian_vec(d * c))?;
    normalize_columns(&mut state.weights);

    let cfg = state.config.clone();
    let sgd = cfg.base_sgd.clone();
    let inv_t = 1.0 / cfg.cls_temp;
    let mut vel = Velocity::zeros_for(&state.encoder);
    let mut w_vel = zeros_like(&state.weights);
    let mut loss_trace = Vec::with_capacity(sgd.epochs);
    let mut nc_trace = Vec::with_capacity(sgd.epochs + 1);
    let checkpoint = |state: &SessionState, epoch: usize, trace: &mut Vec<NcCheckpoint>| -> Result<()> {
        if let Some(nc) = diagnostics(state, &stage.train.inputs, &labels)? {
            trace.push(NcCheckpoint { stage: 0, epoch, nc });
        }
        Ok(())
    };
    checkpoint(&state, 0, &mut nc_trace)?;

    for epoch in 1..=sgd.epochs {
        let mut meter = LossMeter::default();
        for batch in batches(stage.train.len(), sgd.batch_size, &mut rng) {
            let x = stage.train.inputs.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let views = two_views(&state.encoder, &x, cfg.base_aug_sigma, &mut rng)?;

            let rep = base_rep(&views.unit_a, &views.unit_b, &y, &cfg.loss)?;
            let cls = cls_cross_entropy(&views.unit_a.scaled(inv_t), &y, &state.weights)?;
            let align = if cfg.sup_etf_align {
                supervised_alignment(&views.raw_a, &y, &state.frame, &state.ledger)?
            } else {
                LossResult {
                    value: 0.0,
                    grad_embeddings: zeros_like(&views.raw_a),
                    grad_paired: None,
                    grad_weights: None,
                }
            };
            let total = base_total(&align, &rep, &cls)?;

            let mut g_unit_a = rep.grad_embeddings.clone();
            g_unit_a.axpy(inv_t, &cls.grad_embeddings)?;
            let g_unit_b = rep.grad_paired.clone().unwrap_or_else(|| zeros_like(&views.unit_b));
            let mut g_a = normalize_rows_backward(&views.unit_a, &views.norms_a, &g_unit_a)?;
            g_a.axpy(1.0, &align.grad_embeddings)?;
            let g_b = normalize_rows_backward(&views.unit_b, &views.norms_b, &g_unit_b)?;

            encoder_step(&mut state, &views, &g_a, &g_b, &sgd, &mut vel)?;
            let g_w = cls
                .grad_weights
                .as_ref()
                .expect("classifier loss has a weight gradient");
            classifier_step(&mut state.weights, g_w, &mut w_vel, &sgd, 0);
            meter.add(total.value, align.value, rep.value, cls.value);
        }
        loss_trace.push(meter.finish(epoch));
        checkpoint(&state, epoch, &mut nc_trace)?;
    }

    let old: BTreeSet<usize> = base.iter().copied().collect();
    let (acc, nc) = evaluate(&state, &stage.test, &old)?;
    let mut rep = report(0, acc, loss_trace, nc);
    rep.nc_trace = nc_trace;
    Ok((state, rep))
}

/// Confident-set routing for one epoch.
struct AlignmentPlan {
    subset: ConfidentSubset,
    /// Pseudo-label of every training row.
    pseudo: Vec<usize>,
    /// Frame column for each training row, if it is aligned this epoch.
    targets: Vec<Option<usize>>,
    /// Unit cluster centers of the novel portion, one row per new class.
    centers: Matrix,
}

/// `centers` continues the clustering of the previous epoch so cluster identities, and with
/// them the matched prototypes, persist across epochs.
fn plan_alignment(
    state: &SessionState,
    unit: &Matrix,
    c_old: usize,
    k_new: usize,
    centers: &Matrix,
) -> Result<AlignmentPlan> {
    let cfg = &state.config;
    let logits = unit.matmul(&state.weights)?;
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    for (i, row) in logits.row_iter().enumerate() {
        probs.row_mut(i).copy_from_slice(&softmax(row, cfg.cls_temp));
    }
    let subset = select_confident(&probs, cfg.alpha)?;
    let pseudo: Vec<usize> = logits.row_iter().map(argmax).collect();
    let conf_pseudo: Vec<usize> = subset.indices.iter().map(|&i| pseudo[i]).collect();
    let old_classes = if cfg.literal_unassigned_only { 0 } else { c_old };

    let cluster_pos: Vec<usize> = (0..subset.len()).filter(|&p| conf_pseudo[p] >= old_classes).collect();
    let mut cluster_of = vec![0usize; subset.len()];
    let mut next_centers = centers.clone();
    let matched = if k_new == 0 || cluster_pos.is_empty() {
        PrototypeMatch {
            phi: Vec::new(),
            objective: 0.0,
        }
    } else {
        let rows: Vec<usize> = cluster_pos.iter().map(|&p| subset.indices[p]).collect();
        let clusters = kmeans_from(&unit.select_rows(&rows), centers, cfg.kmeans_iters)?;
        for (&p, &c) in cluster_pos.iter().zip(&clusters.assignment) {
            cluster_of[p] = c;
        }
        next_centers = clusters.centers.clone();
        match_prototypes(&clusters.centers, &state.frame, &state.ledger)?
    };

    let mut targets = vec![None; unit.rows()];
    if !(matched.phi.is_empty() && old_classes == 0) {
        let keep: Vec<usize> = (0..subset.len())
            .filter(|&p| conf_pseudo[p] < old_classes || !matched.phi.is_empty())
            .collect();
        let sub = ConfidentSubset {
            indices: keep.iter().map(|&p| subset.indices[p]).collect(),
            entropies: subset.entropies.clone(),
            alpha: subset.alpha,
        };
        let sub_pseudo: Vec<usize> = keep.iter().map(|&p| conf_pseudo[p]).collect();
        let sub_clusters: Vec<usize> = keep.iter().map(|&p| cluster_of[p]).collect();
        let routed = route_alignment_targets(&sub, &sub_pseudo, old_classes, &state.ledger, &matched, &sub_clusters)?;
        for (&i, col) in sub.indices.iter().zip(routed) {
            targets[i] = Some(col);
        }
    }
    Ok(AlignmentPlan {
        subset,
        pseudo,
        targets,
        centers: next_centers,
    })
}

/// Binds each new classifier column to the free frame column most of its confident samples
/// were routed to, solved jointly as an assignment.
fn commit_new_classes(state: &mut SessionState, plan: &AlignmentPlan, c_old: usize, k_new: usize) -> Result<()> {
    if k_new == 0 {
        return Ok(());
    }
    let free = state.ledger.free();
    let column_index: BTreeMap<usize, usize> = free.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let mut votes = Matrix::zeros(k_new, free.len());
    for &i in &plan.subset.indices {
        let p = plan.pseudo[i];
        if p < c_old {
            continue;
        }
        if let Some(j) = plan.targets[i].and_then(|col| column_index.get(&col)) {
            votes[(p - c_old, *j)] += 1.0;
        }
    }
    let top = votes.max_abs();
    let choice = solve_min_lexicographic(&votes.map(|v| top - v))?;
    for (r, &j) in choice.row_to_col.iter().enumerate() {
        state.ledger.assign_to(c_old + r, free[j])?;
    }
    Ok(())
}

/// Unsupervised incremental session on stage `t ≥ 1`. The number of novel classes is
/// `stage.classes_new.len()`.
pub fn run_incremental(mut state: SessionState, stage: &StageData) -> Result<(SessionState, StageReport)> {
    if stage.stage == 0 {
        return Err(Error::Argument("incremental sessions start at stage 1".into()));
    }
    if state.class_count() == 0 {
        return Err(Error::MissingStage(
            "incremental session before the base session".into(),
        ));
    }
    if stage.train.is_empty() {
        return Err(Error::Empty(format!("stage {} training split", stage.stage)));
    }
    let k_new = stage.classes_new.len();
    if k_new > state.ledger.free_count() {
        return Err(Error::Capacity {
            requested: k_new,
            available: state.ledger.free_count(),
        });
    }
    let c_old = state.class_count();
    state.t = stage.stage;
    state.classes_old = (0..c_old).collect();
    state.classes_new = (c_old..c_old + k_new).collect();

    let cfg = state.config.clone();
    let sgd = cfg.incremental_sgd.clone();
    let inv_t = 1.0 / cfg.cls_temp;
    let mut rng = state.rng.fork(100 + stage.stage as u64);
    let inputs = &stage.train.inputs;

    if k_new > 0 {
        let unit = state.embed_unit(inputs)?;
        let k = c_old + k_new;
        if unit.rows() < k {
            return Err(Error::Argument(format!(
                "{} training samples cannot form {k} clusters",
                unit.rows()
            )));
        }
        let clusters = kmeans_restarts(&unit, k, rng.next_u64(), cfg.kmeans_iters, cfg.kmeans_restarts)?;
        state.weights = expand_classifier(&state.weights, &clusters, k_new)?;
        normalize_columns(&mut state.weights);
    }
    let frozen = if cfg.freeze_old_weights { c_old } else { 0 };

    let mut vel = Velocity::zeros_for(&state.encoder);
    let mut w_vel = zeros_like(&state.weights);
    let mut loss_trace = Vec::with_capacity(sgd.epochs);
    let mut centers = state
        .weights
        .select_cols(&(c_old..c_old + k_new).collect::<Vec<_>>())
        .transpose();
    for epoch in 1..=sgd.epochs {
        let unit = state.embed_unit(inputs)?;
        let plan = plan_alignment(&state, &unit, c_old, k_new, &centers)?;
        centers = plan.centers.clone();
        let mut meter = LossMeter::default();
        for batch in batches(stage.train.len(), sgd.batch_size, &mut rng) {
            let x = inputs.select_rows(&batch);
            let views = two_views(&state.encoder, &x, cfg.incremental_aug_sigma, &mut rng)?;

            let rep = unsup_contrastive(&views.unit_a, &views.unit_b, &cfg.loss)?;
            let student = views.unit_a.matmul(&state.weights)?.scaled(inv_t);
            let teacher = views.unit_b.matmul(&state.weights)?;
            let cls_logits = unsup_cls(&student, &teacher, &cfg.loss)?;
            let cls = LossResult {
                value: cls_logits.value,
                grad_embeddings: cls_logits.grad_embeddings.matmul_t(&state.weights)?.scaled(inv_t),
                grad_paired: None,
                grad_weights: Some(views.unit_a.t_matmul(&cls_logits.grad_embeddings)?.scaled(inv_t)),
            };

            let aligned: Vec<usize> = (0..batch.len()).filter(|&r| plan.targets[batch[r]].is_some()).collect();
            let mut align = LossResult {
                value: 0.0,
                grad_embeddings: zeros_like(&views.raw_a),
                grad_paired: None,
                grad_weights: None,
            };
            if cfg.unsup_etf_align && !aligned.is_empty() {
                let cols: Vec<usize> = aligned.iter().map(|&r| plan.targets[batch[r]].unwrap()).collect();
                let part = unsup_alignment(&views.raw_a.select_rows(&aligned), &cols, &state.frame)?;
                align.value = part.value;
                for (k, &r) in aligned.iter().enumerate() {
                    align
                        .grad_embeddings
                        .row_mut(r)
                        .copy_from_slice(part.grad_embeddings.row(k));
                }
            }
            let lambda = if cfg.unsup_etf_align {
                cfg.loss.lambda_align
            } else {
                0.0
            };
            let total = incremental_total(
                &align,
                &rep,
                &cls,
                &LossConfig {
                    lambda_align: lambda,
                    ..cfg.loss.clone()
                },
            )?;

            let mut g_unit_a = rep.grad_embeddings.clone();
            g_unit_a.axpy(1.0, &cls.grad_embeddings)?;
            let g_unit_b = rep.grad_paired.clone().unwrap_or_else(|| zeros_like(&views.unit_b));
            let mut g_a = normalize_rows_backward(&views.unit_a, &views.norms_a, &g_unit_a)?;
            g_a.axpy(lambda, &align.grad_embeddings)?;
            let g_b = normalize_rows_backward(&views.unit_b, &views.norms_b, &g_unit_b)?;

            encoder_step(&mut state, &views, &g_a, &g_b, &sgd, &mut vel)?;
            let g_w = cls.grad_weights.as_ref().expect("set above");
            classifier_step(&mut state.weights, g_w, &mut w_vel, &sgd, frozen);
            meter.add(total.value, align.value, rep.value, cls.value);
        }
        loss_trace.push(meter.finish(epoch));
    }

    let unit = state.embed_unit(inputs)?;
    let plan = plan_alignment(&state, &unit, c_old, k_new, &centers)?;
    commit_new_classes(&mut state, &plan, c_old, k_new)?;

    let old: BTreeSet<usize> = stage.classes_known.iter().copied().collect();
    let (acc, nc) = evaluate(&state, &stage.test, &old)?;
    let mut rep = report(stage.stage, acc, loss_trace, nc);
    rep.nc_trace = nc
        .map(|nc| NcCheckpoint {
            stage: stage.stage,
            epoch: sgd.epochs,
            nc,
        })
        .into_iter()
        .collect();
    rep.selection_stats = Some(SelectionStats {
        size: plan.subset.len(),
        mean_entropy: plan.subset.mean_entropy(),
    });
    Ok((state, rep))
}

/// Forgetting and discovery rates; both absent without an incremental stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub m_f: Option<f64>,
    pub m_d: Option<f64>,
}

pub fn summarize(reports: &[StageReport]) -> Result<Summary> {
    let Some(first) = reports.first() else {
        return Err(Error::MissingStage("no stage reports".into()));
    };
    let incremental: Vec<AccuracyTriple> = reports[1..].iter().map(|r| r.accuracy).collect();
    if incremental.is_empty() {
        return Ok(Summary { m_f: None, m_d: None });
    }
    Ok(Summary {
        m_f: Some(forgetting_rate(&incremental, first.acc_all)?),
        m_d: Some(discovery_rate(&incremental)?),
    })
}

#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub reports: Vec<StageReport>,
    pub summary: Summary,
    pub state: SessionState,
}

impl ProtocolRun {
    pub fn nc_trace(&self) -> Vec<NcCheckpoint> {
        self.reports.iter().flat_map(|r| r.nc_trace.iter().copied()).collect()
    }
}

/// Base session on `stream[0]`, then one incremental session per later stage.
pub fn run_protocol(config: &SessionConfig, stream: &[StageData]) -> Result<ProtocolRun> {
    let first = stream
        .first()
        .ok_or_else(|| Error::Empty("stream has no stages".into()))?;
    let classes: BTreeSet<usize> = stream
        .iter()
        .flat_map(|s| s.classes_new.iter().chain(&s.classes_known).copied())
        .collect();
    let frame_count = config.frame_count.unwrap_or(classes.len());
    if frame_count > config.embed_dim {
        return Err(Error::Dimension(format!(
            "{frame_count} prototypes need embed_dim ≥ {frame_count}, got {}",
            config.embed_dim
        )));
    }
    let input_dim = first.train.inputs.cols();
    let mut state = SessionState::new(config.clone(), input_dim, frame_count)?;
    let mut reports = Vec::with_capacity(stream.len());
    let (next, report) = run_base(state, first)?;
    state = next;
    reports.push(report);
    for stage in &stream[1..] {
        let (next, report) = run_incremental(state, stage)?;
        state = next;
        reports.push(report);
    }
    let summary = summarize(&reports)?;
    Ok(ProtocolRun {
        reports,
        summary,
        state,
    })
}
