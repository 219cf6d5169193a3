//! Training objectives with closed-form values and analytic gradients.
//!
//! Every function returns a [`LossResult`] whose gradients are taken with respect to the
//! exact arguments passed in. The contrastive losses expect row-normalized inputs; the
//! alignment losses normalize internally and differentiate through the normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::{AllocationLedger, EtfFrame};
use crate::numkit::{dot, log_softmax, log_sum_exp, norm, softmax, Matrix};

/// Loss hyperparameters. Entropies are in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the supervised term in the base contrastive mix.
    pub lambda_rep: f64,
    /// Weight of the unsupervised alignment term in the incremental objective.
    pub lambda_align: f64,
    /// Weight of the mean-prediction entropy bonus.
    pub epsilon: f64,
    /// Sharpening temperature for the teacher distribution.
    pub teacher_temp: f64,
    /// Drop the positive pair from the unsupervised contrastive denominator.
    pub literal_eq5_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda_rep: 0.35,
            lambda_align: 0.7,
            epsilon: 2.0,
            teacher_temp: 0.05,
            literal_eq5_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, v: f64| Err(Error::Argument(format!("{k} = {v} is out of range")));
        if !(self.tau > 0.0) {
            return bad("tau", self.tau);
        }
        if !(self.teacher_temp > 0.0) {
            return bad("teacher_temp", self.teacher_temp);
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon", self.epsilon);
        }
        if !(0.0..=1.0).contains(&self.lambda_rep) {
            return bad("lambda_rep", self.lambda_rep);
        }
        if !(self.lambda_align >= 0.0) {
            return bad("lambda_A", self.lambda_align);
        }
        Ok(())
    }
}

/// Scalar loss plus gradients.
///
/// `grad_paired` holds the gradient for a second view when the loss takes one;
/// `grad_weights` holds the classifier gradient when the loss depends on one.
#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    pub grad_embeddings: Matrix,
    pub grad_paired: Option<Matrix>,
    pub grad_weights: Option<Matrix>,
}

impl LossResult {
    fn single(value: f64, grad_embeddings: Matrix) -> Self {
        Self {
            value,
            grad_embeddings,
            grad_paired: None,
            grad_weights: None,
        }
    }

    /// Same loss with zero value and zero gradients of matching shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            value: 0.0,
            grad_embeddings: z(&self.grad_embeddings),
            grad_paired: self.grad_paired.as_ref().map(z),
            grad_weights: self.grad_weights.as_ref().map(z),
        }
    }

    /// `Σ w_i · L_i` with gradients combined the same way. Optional gradients are summed
    /// where present.
    pub fn weighted_sum(parts: &[(f64, &LossResult)]) -> Result<LossResult> {
        let (_, first) = parts.first().ok_or_else(|| Error::Empty("no loss terms".into()))?;
        let mut out = first.zeros_like();
        for (w, part) in parts {
            out.value += w * part.value;
            out.grad_embeddings.axpy(*w, &part.grad_embeddings)?;
            accumulate(&mut out.grad_paired, *w, part.grad_paired.as_ref())?;
            accumulate(&mut out.grad_weights, *w, part.grad_weights.as_ref())?;
        }
        Ok(out)
    }
}

fn accumulate(acc: &mut Option<Matrix>, w: f64, g: Option<&Matrix>) -> Result<()> {
    if let Some(g) = g {
        match acc {
            Some(a) => a.axpy(w, g)?,
            None => *acc = Some(g.scaled(w)),
        }
    }
    Ok(())
}

/// `−(1/N) Σ ⟨ê_i, p_{t_i}⟩` over raw embeddings with explicit target columns.
fn alignment(embeddings: &Matrix, targets: &[usize], frame: &EtfFrame) -> Result<LossResult> {
    let (n, d) = embeddings.shape();
    if n == 0 {
        return Err(Error::Empty("alignment batch".into()));
    }
    if targets.len() != n {
        return Err(Error::Dimension(format!(
            "{} targets for {n} embeddings",
            targets.len()
        )));
    }
    if d != frame.dim() {
        return Err(Error::Dimension(format!(
            "embedding dim {d} does not match frame dim {}",
            frame.dim()
        )));
    }
    let protos = frame.prototype_rows();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, d);
    for (i, &t) in targets.iter().enumerate() {
        if t >= frame.count() {
            return Err(Error::IndexOutOfRange {
                index: t,
                limit: frame.count(),
            });
        }
        let e = embeddings.row(i);
        let len = norm(e);
        if len == 0.0 || !len.is_finite() {
            return Err(Error::ZeroVector(i));
        }
        let p = protos.row(t);
        let cos = dot(e, p) / len;
        value -= cos * inv_n;
        for ((g, &pk), &ek) in grad.row_mut(i).iter_mut().zip(p).zip(e) {
            *g = -inv_n * (pk - cos * ek / len) / len;
        }
    }
    Ok(LossResult::single(value, grad))
}

/// Pulls each labeled embedding toward its class's frame column.
pub fn supervised_alignment(
    embeddings: &Matrix,
    labels: &[usize],
    frame: &EtfFrame,
    ledger: &AllocationLedger,
) -> Result<LossResult> {
    let targets = labels.iter().map(|&y| ledger.require(y)).collect::<Result<Vec<_>>>()?;
    alignment(embeddings, &targets, frame)
}

/// Pulls each embedding toward the frame column routed to it.
pub fn unsup_alignment(embeddings: &Matrix, prototype_indices: &[usize], frame: &EtfFrame) -> Result<LossResult> {
    alignment(embeddings, prototype_indices, frame)
}

/// Two-view InfoNCE over row-normalized views.
///
/// Each anchor `a_i` scores its positive `b_i` against the other anchors `a_j`. By default the
/// positive also appears in the denominator; `literal_eq5_denominator` removes it.
pub fn unsup_contrastive(view_a: &Matrix, view_b: &Matrix, cfg: &LossConfig) -> Result<LossResult> {
    view_a.check_same_shape(view_b)?;
    let (b, d) = view_a.shape();
    if b < 2 {
        return Err(Error::BatchSize(b));
    }
    let tau = cfg.tau;
    let inv_b = 1.0 / b as f64;
    let aa = view_a.matmul_t(view_a)?;
    let mut ga = Matrix::zeros(b, d);
    let mut gb = Matrix::zeros(b, d);
    let mut value = 0.0;
    let mut scores = Vec::with_capacity(b);
    for i in 0..b {
        let a_i = view_a.row(i);
        let b_i = view_b.row(i);
        let pos = dot(a_i, b_i) / tau;
        scores.clear();
        if !cfg.literal_eq5_denominator {
            scores.push(pos);
        }
        scores.extend((0..b).filter(|&j| j != i).map(|j| aa[(i, j)] / tau));
        let lse = log_sum_exp(&scores);
        value += (lse - pos) * inv_b;

        // dL_i/d(score) for each entry, then chain through the dot products.
        let offset = usize::from(!cfg.literal_eq5_denominator);
        let pos_coeff = if cfg.literal_eq5_denominator {
            -1.0
        } else {
            (scores[0] - lse).exp() - 1.0
        };
        let c = pos_coeff * inv_b / tau;
        for k in 0..d {
            ga[(i, k)] += c * b_i[k];
            gb[(i, k)] += c * a_i[k];
        }
        let mut slot = offset;
        for j in 0..b {
            if j == i {
                continue;
            }
            let q = (scores[slot] - lse).exp();
            slot += 1;
            let c = q * inv_b / tau;
            let a_j = view_a.row(j);
            for k in 0..d {
                ga[(i, k)] += c * a_j[k];
                ga[(j, k)] += c * a_i[k];
            }
        }
    }
    Ok(LossResult {
        value,
        grad_embeddings: ga,
        grad_paired: Some(gb),
        grad_weights: None,
    })
}

/// Supervised contrastive loss over a single row-normalized view.
///
/// Anchors without a same-label partner are skipped and excluded from the mean.
pub fn sup_contrastive(view: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<LossResult> {
    let (b, d) = view.shape();
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    let tau = cfg.tau;
    let sims = view.matmul_t(view)?;
    let anchors: Vec<usize> = (0..b)
        .filter(|&i| (0..b).any(|h| h != i && labels[h] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Degenerate(
            "supervised contrastive batch has no positive pairs".into(),
        ));
    }
    let inv_a = 1.0 / anchors.len() as f64;
    let mut grad = Matrix::zeros(b, d);
    let mut value = 0.0;
    let mut scores = vec![0.0; b];
    for &i in &anchors {
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        for &j in &others {
            scores[j] = sims[(i, j)] / tau;
        }
        let lse = log_sum_exp(&others.iter().map(|&j| scores[j]).collect::<Vec<_>>());
        let positives: Vec<usize> = others.iter().copied().filter(|&h| labels[h] == labels[i]).collect();
        let inv_h = 1.0 / positives.len() as f64;
        let pos_mean = positives.iter().map(|&h| scores[h]).sum::<f64>() * inv_h;
        value += (lse - pos_mean) * inv_a;

        let e_i = view.row(i).to_vec();
        for &j in &others {
            let mut coeff = (scores[j] - lse).exp();
            if labels[j] == labels[i] {
                coeff -= inv_h;
            }
            let c = coeff * inv_a / tau;
            if c == 0.0 {
                continue;
            }
            let e_j = view.row(j).to_vec();
            for k in 0..d {
                grad[(i, k)] += c * e_j[k];
                grad[(j, k)] += c * e_i[k];
            }
        }
    }
    Ok(LossResult::single(value, grad))
}

/// `(1 − λ_rep)·L_rep^u + λ_rep·L_rep^s`.
///
/// A batch without any positive pair contributes no supervised term.
pub fn base_rep(view_a: &Matrix, view_b: &Matrix, labels: &[usize], cfg: &LossConfig) -> Result<LossResult> {
    let unsup = unsup_contrastive(view_a, view_b, cfg)?;
    let lam = cfg.lambda_rep;
    if lam == 0.0 {
        return Ok(unsup);
    }
    let sup = match sup_contrastive(view_a, labels, cfg) {
        Ok(s) => s,
        Err(Error::Degenerate(_)) => return LossResult::weighted_sum(&[(1.0 - lam, &unsup)]),
        Err(e) => return Err(e),
    };
    if lam == 1.0 {
        // Keep the paired-view gradient slot so callers see a uniform shape.
        let mut out = sup;
        out.grad_paired = Some(Matrix::zeros(view_b.rows(), view_b.cols()));
        return Ok(out);
    }
    LossResult::weighted_sum(&[(1.0 - lam, &unsup), (lam, &sup)])
}

/// Softmax cross-entropy of `Wᵀe_i` against integer labels.
pub fn cls_cross_entropy(embeddings: &Matrix, labels: &[usize], weights: &Matrix) -> Result<LossResult> {
    let (b, _) = embeddings.shape();
    let k = weights.cols();
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    if b == 0 {
        return Err(Error::Empty("classification batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let logits = embeddings.matmul(weights)?;
    let inv_b = 1.0 / b as f64;
    let mut dlogits = Matrix::zeros(b, k);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logp = log_softmax(logits.row(i), 1.0);
        value -= logp[y] * inv_b;
        for (c, g) in dlogits.row_mut(i).iter_mut().enumerate() {
            *g = (logp[c].exp() - f64::from(u8::from(c == y))) * inv_b;
        }
    }
    Ok(LossResult {
        value,
        grad_embeddings: dlogits.matmul_t(weights)?,
        grad_paired: None,
        grad_weights: Some(embeddings.t_matmul(&dlogits)?),
    })
}

/// Self-distillation against sharpened teacher targets with a mean-entropy bonus:
/// `(1/B) Σ H(z_j, s_j) − ε·H(s̄)`. The teacher branch receives no gradient.
pub fn unsup_cls(student_logits: &Matrix, teacher_logits: &Matrix, cfg: &LossConfig) -> Result<LossResult> {
    student_logits.check_same_shape(teacher_logits)?;
    let (b, k) = student_logits.shape();
    if b == 0 || k == 0 {
        return Err(Error::Empty("prediction batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut probs = Matrix::zeros(b, k);
    let mut mean = vec![0.0; k];
    let mut grad = Matrix::zeros(b, k);
    let mut value = 0.0;
    for j in 0..b {
        let z = softmax(teacher_logits.row(j), cfg.teacher_temp);
        let logs = log_softmax(student_logits.row(j), 1.0);
        let s: Vec<f64> = logs.iter().map(|x| x.exp()).collect();
        value -= inv_b * z.iter().zip(&logs).map(|(zi, li)| zi * li).sum::<f64>();
        for c in 0..k {
            grad[(j, c)] = (s[c] - z[c]) * inv_b;
            mean[c] += s[c] * inv_b;
        }
        probs.row_mut(j).copy_from_slice(&s);
    }
    if cfg.epsilon != 0.0 {
        let log_mean: Vec<f64> = mean.iter().map(|m| m.max(f64::MIN_POSITIVE).ln()).collect();
        let h_mean = -mean.iter().zip(&log_mean).map(|(m, l)| m * l).sum::<f64>();
        value -= cfg.epsilon * h_mean;
        for j in 0..b {
            let s = probs.row(j);
            let cross = dot(s, &log_mean);
            for c in 0..k {
                // dH(s̄)/dl_jc = (1/B)·s_jc·(Σ_m s_jm log s̄_m − log s̄_c)
                let dh = inv_b * s[c] * (cross - log_mean[c]);
                grad[(j, c)] -= cfg.epsilon * dh;
            }
        }
    }
    Ok(LossResult::single(value, grad))
}

/// Base-session objective `L_Align^s + L_rep^Base + L_cls`.
pub fn base_total(align: &LossResult, rep: &LossResult, cls: &LossResult) -> Result<LossResult> {
    LossResult::weighted_sum(&[(1.0, align), (1.0, rep), (1.0, cls)])
}

/// Incremental objective `λ_A·L_Align^u + L_rep^Inc + L_cls^u`.
pub fn incremental_total(
    align: &LossResult,
    rep: &LossResult,
    cls: &LossResult,
    cfg: &LossConfig,
) -> Result<LossResult> {
    LossResult::weighted_sum(&[(cfg.lambda_align, align), (1.0, rep), (1.0, cls)])
}
