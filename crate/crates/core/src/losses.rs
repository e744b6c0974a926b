//! Training objectives: supervised contrastive loss, its prior-weighted
//! intra-client variant, prototype-anchored inter-client contrast,
//! cross-entropy, difficulty-aware logit adjustment, and the combined loss.
//!
//! Each objective is available as a tape builder (`*_node`) for training
//! and as an eager wrapper returning the scalar value. The two share the
//! same code path, so values are identical.

use crate::error::{CoreError, Result};
use crate::model::PrototypeSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Mean per-class losses below this are clamped before entering the margin
/// power; a near-zero class loss would explode the margin.
pub const MIN_MEAN_LOSS: f64 = 1e-3;

fn default_tau() -> f64 {
    0.1
}
fn default_zoom() -> f64 {
    0.5
}
fn default_q() -> f64 {
    0.25
}
fn default_k() -> f64 {
    2.0
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Base contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Exponent of the prior-product zoom factor on pair temperatures.
    #[serde(default = "default_zoom")]
    pub zoom_t: f64,
    /// Exponent weighting class difficulty inside logit margins.
    #[serde(default = "default_q")]
    pub difficulty_q: f64,
    /// Weight of the intra-client contrastive term.
    #[serde(default = "default_k")]
    pub k1: f64,
    /// Weight of the inter-client contrastive term.
    #[serde(default = "default_k")]
    pub k2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: default_tau(),
            zoom_t: default_zoom(),
            difficulty_q: default_q(),
            k1: default_k(),
            k2: default_k(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::config("temperature tau must be positive"));
        }
        if self.zoom_t < 0.0 || self.difficulty_q < 0.0 {
            return Err(CoreError::config("zoom and difficulty exponents must be >= 0"));
        }
        if self.k1 < 0.0 || self.k2 < 0.0 {
            return Err(CoreError::config("loss trade-off weights must be >= 0"));
        }
        Ok(())
    }
}

/// Additive-smoothing prior from per-class counts:
/// `(count + 1) / (total + L)`. Never zero, so it is safe inside logs and
/// powers even when classes are missing.
pub fn smoothed_prior(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let denom = (total + counts.len() as u64) as f64;
    counts.iter().map(|&c| (c + 1) as f64 / denom).collect()
}

/// Pair temperature scaled by the prior product: `(p_i * p_j)^t * tau`.
pub fn dynamic_temperature(p_i: f64, p_j: f64, tau: f64, t: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(CoreError::contract("temperature tau must be positive"));
    }
    if !(p_i > 0.0 && p_i <= 1.0) || !(p_j > 0.0 && p_j <= 1.0) {
        return Err(CoreError::contract(format!(
            "priors must lie in (0, 1], got {} and {}",
            p_i, p_j
        )));
    }
    if t < 0.0 {
        return Err(CoreError::contract("zoom exponent must be >= 0"));
    }
    Ok((p_i * p_j).powf(t) * tau)
}

fn check_unit_rows(z: &Tensor, what: &str) -> Result<()> {
    for r in 0..z.rows() {
        let norm: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        // Loose tolerance: finite-difference probes nudge entries off the
        // sphere by the step size.
        if (norm - 1.0).abs() > 1e-3 {
            return Err(CoreError::contract(format!(
                "{} row {} has norm {}, expected unit",
                what, r, norm
            )));
        }
    }
    Ok(())
}

/// Shared core of the batch-contrastive losses. `inv_temp[i][j]` multiplies
/// the raw similarity `z_i . z_j`. For each anchor `i` with a non-empty
/// positive set `P(i)` (same label, excluding `i`), the contribution is
/// `per-positive mean of -(s_ij - logsumexp over A(i))`; anchors without
/// positives contribute zero.
fn pair_contrastive_node(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    inv_temp: Tensor,
) -> Result<Var> {
    let n = tape.value(z).rows();
    if labels.len() != n {
        return Err(CoreError::contract(format!(
            "{} embeddings vs {} labels",
            n,
            labels.len()
        )));
    }
    if n < 2 {
        return Err(CoreError::contract("contrastive batch needs at least 2 samples"));
    }
    let sims = tape.matmul_nt(z, z)?;
    let scaled = tape.mul_const(sims, inv_temp)?;

    let mut off_diag = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off_diag.values_mut()[i * n + j] = 1.0;
            }
        }
    }
    let lse = tape.masked_row_logsumexp(scaled, off_diag)?;

    let mut positive_weights = Tensor::zeros(vec![n, n]);
    let mut anchor_active = Tensor::zeros(vec![n, 1]);
    for i in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let w = -1.0 / positives.len() as f64;
        for j in positives {
            positive_weights.values_mut()[i * n + j] = w;
        }
        anchor_active.values_mut()[i] = 1.0;
    }
    let pos_term = tape.mul_const(scaled, positive_weights)?;
    let pos_term = tape.sum(pos_term);
    let lse_term = tape.mul_const(lse, anchor_active)?;
    let lse_term = tape.sum(lse_term);
    tape.add(pos_term, lse_term)
}

/// Supervised contrastive loss over a multiviewed batch at a fixed
/// temperature.
pub fn scl_loss_node(tape: &mut Tape, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(CoreError::contract("temperature tau must be positive"));
    }
    check_unit_rows(tape.value(z), "embedding")?;
    let n = tape.value(z).rows();
    let inv_temp = Tensor::matrix(n, n, vec![1.0 / tau; n * n])?;
    pair_contrastive_node(tape, z, labels, inv_temp)
}

/// Intra-client contrastive loss: pairwise temperatures are zoomed by the
/// product of the two classes' local priors, so minority pairs weigh more.
pub fn intra_loss_node(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    local_prior: &[f64],
    config: &LossConfig,
) -> Result<Var> {
    config.validate().map_err(|e| CoreError::contract(e.to_string()))?;
    check_unit_rows(tape.value(z), "embedding")?;
    let n = tape.value(z).rows();
    if labels.len() != n {
        return Err(CoreError::contract(format!("{} embeddings vs {} labels", n, labels.len())));
    }
    for &l in labels {
        if l >= local_prior.len() {
            return Err(CoreError::contract(format!(
                "label {} outside prior of length {}",
                l,
                local_prior.len()
            )));
        }
        if !(local_prior[l] > 0.0) {
            return Err(CoreError::contract(format!(
                "batch class {} has non-positive local prior",
                l
            )));
        }
    }
    let mut inv_temp = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let t_prime =
                dynamic_temperature(local_prior[labels[i]], local_prior[labels[j]], config.tau, config.zoom_t)?;
            inv_temp[i * n + j] = 1.0 / t_prime;
        }
    }
    pair_contrastive_node(tape, z, labels, Tensor::matrix(n, n, inv_temp)?)
}

/// Inter-client contrastive loss against broadcast prototypes. Each sample
/// is pulled toward its class prototype and pushed from the others, with
/// weight `1 / |same-class batch members including self|`.
pub fn inter_loss_node(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    prototypes: &PrototypeSet,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(CoreError::contract("temperature tau must be positive"));
    }
    check_unit_rows(tape.value(z), "embedding")?;
    let n = tape.value(z).rows();
    let num_classes = prototypes.num_classes();
    if labels.len() != n {
        return Err(CoreError::contract(format!("{} embeddings vs {} labels", n, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(CoreError::contract(format!(
            "label {} outside [0, {})",
            bad, num_classes
        )));
    }
    if tape.value(z).cols() != prototypes.dim() {
        return Err(CoreError::shape(
            "inter_loss",
            format!("embedding dim {} vs prototype dim {}", tape.value(z).cols(), prototypes.dim()),
        ));
    }
    let protos = tape.constant(prototypes.matrix().clone());
    let sims = tape.matmul_nt(z, protos)?;
    let scaled = tape.scale(sims, 1.0 / tau);
    let all_ones = Tensor::matrix(n, num_classes, vec![1.0; n * num_classes])?;
    let lse = tape.masked_row_logsumexp(scaled, all_ones)?;

    let mut class_count = vec![0usize; num_classes];
    for &l in labels {
        class_count[l] += 1;
    }
    let mut target_weights = Tensor::zeros(vec![n, num_classes]);
    let mut anchor_weights = Tensor::zeros(vec![n, 1]);
    for (i, &l) in labels.iter().enumerate() {
        let w = 1.0 / class_count[l] as f64;
        target_weights.values_mut()[i * num_classes + l] = -w;
        anchor_weights.values_mut()[i] = w;
    }
    let target_term = tape.mul_const(scaled, target_weights)?;
    let target_term = tape.sum(target_term);
    let lse_term = tape.mul_const(lse, anchor_weights)?;
    let lse_term = tape.sum(lse_term);
    tape.add(target_term, lse_term)
}

/// Mean softmax cross-entropy over the batch.
pub fn ce_loss_node(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = tape.value(logits).rows();
    let classes = tape.value(logits).cols();
    if labels.len() != n {
        return Err(CoreError::contract(format!("{} logit rows vs {} labels", n, labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::contract(format!("label {} outside [0, {})", bad, classes)));
    }
    let log_probs = tape.log_softmax(logits);
    let mut selection = Tensor::zeros(vec![n, classes]);
    let w = -1.0 / n as f64;
    for (i, &l) in labels.iter().enumerate() {
        selection.values_mut()[i * classes + l] = w;
    }
    let picked = tape.mul_const(log_probs, selection)?;
    Ok(tape.sum(picked))
}

/// Per-class additive logit offsets built from smoothed priors and mean
/// class losses: `m_y = ln p(y) - q * ln(max(mean_loss_y, floor))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTable {
    pub margins: Vec<f64>,
    pub priors: Vec<f64>,
    pub mean_losses: Vec<f64>,
    pub q: f64,
}

impl MarginTable {
    /// Build from explicit priors (already positive) and mean losses.
    pub fn from_priors(priors: &[f64], mean_losses: &[f64], q: f64) -> Result<MarginTable> {
        if priors.len() != mean_losses.len() {
            return Err(CoreError::contract(format!(
                "{} priors vs {} mean losses",
                priors.len(),
                mean_losses.len()
            )));
        }
        if q < 0.0 {
            return Err(CoreError::contract("difficulty exponent must be >= 0"));
        }
        for &p in priors {
            if !(p > 0.0 && p <= 1.0) {
                return Err(CoreError::contract(format!("prior {} outside (0, 1]", p)));
            }
        }
        for &l in mean_losses {
            if !(l >= 0.0) {
                return Err(CoreError::contract(format!("mean loss {} must be >= 0", l)));
            }
        }
        let margins = priors
            .iter()
            .zip(mean_losses)
            .map(|(&p, &l)| p.ln() - q * l.max(MIN_MEAN_LOSS).ln())
            .collect();
        Ok(MarginTable {
            margins,
            priors: priors.to_vec(),
            mean_losses: mean_losses.to_vec(),
            q,
        })
    }

    pub fn len(&self) -> usize {
        self.margins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.margins.is_empty()
    }

    /// All-zero margins (logit adjustment disabled).
    pub fn zeros(num_classes: usize) -> MarginTable {
        MarginTable {
            margins: vec![0.0; num_classes],
            priors: vec![1.0 / num_classes as f64; num_classes],
            mean_losses: vec![1.0; num_classes],
            q: 0.0,
        }
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::vector(self.margins.clone())
    }
}

/// Difficulty-aware margins from round-global class counts and mean
/// cross-entropy losses. Counts are smoothed into priors, so missing
/// classes still get finite margins.
pub fn dala_margins(counts: &[u64], mean_losses: &[f64], q: f64) -> Result<MarginTable> {
    if counts.is_empty() || counts.len() != mean_losses.len() {
        return Err(CoreError::contract(format!(
            "{} counts vs {} mean losses",
            counts.len(),
            mean_losses.len()
        )));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(CoreError::contract("margins need at least one observed sample"));
    }
    let priors = smoothed_prior(counts);
    MarginTable::from_priors(&priors, mean_losses, q)
}

/// Cross-entropy on margin-shifted logits. Only view-1 logits should be fed
/// here; the contrastive terms own the second view.
pub fn dala_loss_node(
    tape: &mut Tape,
    logits_view1: Var,
    labels: &[usize],
    margins: &MarginTable,
) -> Result<Var> {
    if margins.len() != tape.value(logits_view1).cols() {
        return Err(CoreError::contract(format!(
            "margin table covers {} classes, logits have {}",
            margins.len(),
            tape.value(logits_view1).cols()
        )));
    }
    let shifted = tape.add_const_row(logits_view1, margins.as_row())?;
    ce_loss_node(tape, shifted, labels)
}

/// Combined objective: adjusted cross-entropy plus weighted contrastive
/// terms.
pub fn total_loss_node(
    tape: &mut Tape,
    dala: Var,
    intra: Option<Var>,
    inter: Option<Var>,
    config: &LossConfig,
) -> Result<Var> {
    let mut total = dala;
    if let Some(v) = intra {
        let w = tape.scale(v, config.k1);
        total = tape.add(total, w)?;
    }
    if let Some(v) = inter {
        let w = tape.scale(v, config.k2);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Scalar combination of already-evaluated components.
pub fn total_loss(dala: f64, intra: f64, inter: f64, config: &LossConfig) -> f64 {
    dala + config.k1 * intra + config.k2 * inter
}

fn eager_scalar(
    z: &Tensor,
    build: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(z.clone());
    let node = build(&mut tape, leaf)?;
    tape.scalar_value(node)
}

/// Eager value of [`scl_loss_node`].
pub fn scl_loss(z: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    eager_scalar(z, |tape, leaf| scl_loss_node(tape, leaf, labels, tau))
}

/// Eager value of [`intra_loss_node`].
pub fn intra_loss(
    z: &Tensor,
    labels: &[usize],
    local_prior: &[f64],
    config: &LossConfig,
) -> Result<f64> {
    eager_scalar(z, |tape, leaf| intra_loss_node(tape, leaf, labels, local_prior, config))
}

/// Eager value of [`inter_loss_node`].
pub fn inter_loss(z: &Tensor, labels: &[usize], prototypes: &PrototypeSet, tau: f64) -> Result<f64> {
    eager_scalar(z, |tape, leaf| inter_loss_node(tape, leaf, labels, prototypes, tau))
}

/// Eager value of [`ce_loss_node`].
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    eager_scalar(logits, |tape, leaf| ce_loss_node(tape, leaf, labels))
}

/// Eager value of [`dala_loss_node`].
pub fn dala_loss(logits_view1: &Tensor, labels: &[usize], margins: &MarginTable) -> Result<f64> {
    eager_scalar(logits_view1, |tape, leaf| dala_loss_node(tape, leaf, labels, margins))
}
