//! Proxy/center based metric-learning losses with analytic gradients.
//!
//! Every per-example loss in this module has the same outer shape: a vector of
//! class similarities `S_j` is turned into logits `λ(S_j − δ·[j = y])` and the
//! loss is the negative log-likelihood of the true class. The losses differ
//! only in how `S_j` is obtained from the example and the class centers:
//!
//! | loss              | centers/class | similarity                     | margin |
//! |-------------------|---------------|--------------------------------|--------|
//! | normalized SoftMax| 1             | `xᵀw_j`                        | 0      |
//! | HardTriple        | K             | `max_k xᵀw_j^k`                | δ      |
//! | SoftTriple        | K             | entropy-smoothed max, temp. γ  | δ      |
//!
//! ProxyNCA drops the true class from the normalizer and is therefore
//! unbounded below; [`proxy_nca_hinge`] clamps it at zero.
//!
//! Inputs are taken as plain slices so that finite-difference checks can
//! perturb them off the unit sphere. Callers are expected to pass unit-norm
//! embeddings and centers.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, dot, log_sum_exp, softmax_weights, Simplex};
use crate::{Error, Result};

/// Smoothing added under the square root of each pairwise center distance so
/// the regularizer stays differentiable when two centers coincide.
pub const REGULARIZER_SMOOTHING: f64 = 1e-12;

/// Class centers laid out as `[class][center][dim]` in one contiguous buffer.
///
/// With one center per class this is the weight matrix of a normalized SoftMax
/// classifier. Unit norm is expected of every center but not enforced here:
/// the trainer briefly holds unnormalized centers between the optimizer step
/// and the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    classes: usize,
    per_class: usize,
    dim: usize,
    data: Vec<f64>,
}

impl CenterBank {
    pub fn new(classes: usize, per_class: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::contract(format!(
                "center bank needs positive shape, got C={classes} K={per_class} d={dim}"
            )));
        }
        if data.len() != classes * per_class * dim {
            return Err(Error::contract(format!(
                "center bank C={classes} K={per_class} d={dim} needs {} values, got {}",
                classes * per_class * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("center bank contains non-finite values"));
        }
        Ok(Self {
            classes,
            per_class,
            dim,
            data,
        })
    }

    /// Builds a bank from explicit per-class center lists.
    pub fn from_centers(centers: &[Vec<Vec<f64>>]) -> Result<Self> {
        let classes = centers.len();
        let per_class = centers.first().map_or(0, Vec::len);
        let dim = centers
            .first()
            .and_then(|c| c.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(classes * per_class * dim);
        for class in centers {
            if class.len() != per_class {
                return Err(Error::contract("ragged center lists"));
            }
            for c in class {
                if c.len() != dim {
                    return Err(Error::contract("centers of differing dimension"));
                }
                data.extend_from_slice(c);
            }
        }
        Self::new(classes, per_class, dim, data)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn offset(&self, class: usize, center: usize) -> usize {
        (class * self.per_class + center) * self.dim
    }

    pub fn center(&self, class: usize, center: usize) -> &[f64] {
        let o = self.offset(class, center);
        &self.data[o..o + self.dim]
    }

    pub fn center_mut(&mut self, class: usize, center: usize) -> &mut [f64] {
        let o = self.offset(class, center);
        &mut self.data[o..o + self.dim]
    }

    /// The `K × d` block of one class.
    pub fn class_centers(&self, class: usize) -> &[f64] {
        let o = self.offset(class, 0);
        &self.data[o..o + self.per_class * self.dim]
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        self.data
            .chunks_exact(self.dim)
            .all(|c| (linalg::norm(c) - 1.0).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Scaling factor applied to similarities before the class softmax.
    pub lambda: f64,
    /// Temperature of the within-class smoothed max.
    pub gamma: f64,
    /// Margin subtracted from the true-class similarity.
    pub delta: f64,
    /// Weight of the center regularizer.
    pub tau: f64,
    /// Centers per class.
    pub centers_per_class: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            gamma: 0.1,
            delta: 0.01,
            tau: 0.2,
            centers_per_class: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::contract(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.centers_per_class == 0 {
            return Err(Error::contract("K must be at least 1"));
        }
        if self.centers_per_class == 1 && self.tau > 0.0 {
            return Err(Error::contract(
                "K=1 with tau>0: the regularizer is undefined for a single center per class",
            ));
        }
        Ok(())
    }
}

/// Loss value with gradients for the embedding and the whole center bank.
///
/// `grad_w` uses the [`CenterBank`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_w: Vec<f64>,
}

/// Similarity between an example and a class; lies in `[-1, 1]` for unit inputs.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ClassSimilarity(pub f64);

impl ClassSimilarity {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `[δ + xᵢᵀxₖ − xᵢᵀxⱼ]₊` for anchor `xi`, positive `xj`, negative `xk`.
pub fn triplet_hinge(xi: &[f64], xj: &[f64], xk: &[f64], delta: f64) -> f64 {
    (delta + dot(xi, xk) - dot(xi, xj)).max(0.0)
}

fn check_example(x: &[f64], y: usize, bank: &CenterBank) -> Result<()> {
    if x.len() != bank.dim() {
        return Err(Error::contract(format!(
            "embedding has dimension {}, centers have {}",
            x.len(),
            bank.dim()
        )));
    }
    if bank.classes() < 2 {
        return Err(Error::contract("losses over classes need C >= 2"));
    }
    if y >= bank.classes() {
        return Err(Error::contract(format!(
            "class id {y} out of range for C={}",
            bank.classes()
        )));
    }
    Ok(())
}

fn require_single_center(bank: &CenterBank) -> Result<()> {
    if bank.per_class() != 1 {
        return Err(Error::contract(format!(
            "loss requires one center per class, bank has K={}",
            bank.per_class()
        )));
    }
    Ok(())
}

/// Negative log-likelihood of class `y` under logits `λ(S_j − δ·[j=y])`.
///
/// Returns the value and `∂ℓ/∂S_j = λ(p_j − [j=y])`.
fn class_nll(sims: &[f64], y: usize, lambda: f64, delta: f64) -> (f64, Vec<f64>) {
    let logits: Vec<f64> = sims
        .iter()
        .enumerate()
        .map(|(j, s)| if j == y { lambda * (s - delta) } else { lambda * s })
        .collect();
    let value = log_sum_exp(&logits) - logits[y];
    let mut grad = softmax_weights(&logits, 1.0);
    grad[y] -= 1.0;
    for g in &mut grad {
        *g *= lambda;
    }
    (value, grad)
}

fn inner_products(x: &[f64], centers: &[f64]) -> Vec<f64> {
    centers.chunks_exact(x.len()).map(|w| dot(x, w)).collect()
}

/// `max_k xᵀw^k` over the `K × d` block `class_centers`.
///
/// Panics if `class_centers` is not a nonempty multiple of `x.len()`.
pub fn class_similarity_hard(x: &[f64], class_centers: &[f64]) -> ClassSimilarity {
    let (_, value) = hard_argmax(x, class_centers);
    ClassSimilarity(value)
}

/// Index and value of the most similar center; the lowest index wins ties.
fn hard_argmax(x: &[f64], class_centers: &[f64]) -> (usize, f64) {
    assert!(
        !x.is_empty() && !class_centers.is_empty() && class_centers.len().is_multiple_of(x.len()),
        "center block does not match embedding dimension"
    );
    let mut best = (0, f64::NEG_INFINITY);
    for (k, s) in inner_products(x, class_centers).into_iter().enumerate() {
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

/// Entropy-smoothed max over a class's centers, `Σ_k q_k xᵀw^k` with
/// `q = softmax(xᵀw/γ)`.
///
/// Satisfies `S_hard − γ ln K ≤ S′ ≤ S_hard`.
pub fn class_similarity_relaxed(
    x: &[f64],
    class_centers: &[f64],
    gamma: f64,
) -> Result<ClassSimilarity> {
    if !(gamma > 0.0) {
        return Err(Error::contract(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(ClassSimilarity(relaxed_parts(x, class_centers, gamma).0))
}

/// Value of the relaxed similarity and its derivative with respect to each
/// inner product `s_k = xᵀw^k`: `q_k (1 + (s_k − S′)/γ)`.
fn relaxed_parts(x: &[f64], class_centers: &[f64], gamma: f64) -> (f64, Vec<f64>) {
    let s = inner_products(x, class_centers);
    let q = softmax_weights(&s, 1.0 / gamma);
    // Written as a nonnegative shortfall below the max so that S′ ≤ S_hard
    // holds in floating point, not just in exact arithmetic.
    let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shortfall: f64 = q.iter().zip(&s).map(|(qk, sk)| qk * (top - sk)).sum();
    let value = top - shortfall;
    let dsim = q
        .iter()
        .zip(&s)
        .map(|(qk, sk)| qk * (1.0 + (sk - value) / gamma))
        .collect();
    (value, dsim)
}

/// Normalized SoftMax loss `−log(exp(λwᵧᵀx) / Σ_j exp(λw_jᵀx))`.
pub fn softmax_norm_loss(x: &[f64], y: usize, bank: &CenterBank, lambda: f64) -> Result<LossEval> {
    check_example(x, y, bank)?;
    require_single_center(bank)?;
    let sims = inner_products(x, bank.data());
    let (value, dsims) = class_nll(&sims, y, lambda, 0.0);
    let d = x.len();
    let mut grad_x = vec![0.0; d];
    let mut grad_w = vec![0.0; bank.data().len()];
    for (j, g) in dsims.iter().enumerate() {
        linalg::axpy(*g, bank.center(j, 0), &mut grad_x);
        linalg::axpy(*g, x, &mut grad_w[j * d..(j + 1) * d]);
    }
    Ok(LossEval {
        value,
        grad_x,
        grad_w,
    })
}

/// `max_{p∈Δ} λ Σ_j p_j xᵀ(w_j − wᵧ) + H(p)` evaluated at its closed-form
/// maximizer. Equal to [`softmax_norm_loss`]; kept as an independent route
/// for checking that identity.
pub fn smoothed_triplet_dual(x: &[f64], y: usize, bank: &CenterBank, lambda: f64) -> Result<f64> {
    check_example(x, y, bank)?;
    require_single_center(bank)?;
    let wy = bank.center(y, 0);
    let violations: Vec<f64> = (0..bank.classes())
        .map(|j| {
            let diff: Vec<f64> = bank.center(j, 0).iter().zip(wy).map(|(a, b)| a - b).collect();
            lambda * dot(x, &diff)
        })
        .collect();
    let p = Simplex::try_new(softmax_weights(&violations, 1.0))?;
    Ok(dot(&p, &violations) + linalg::entropy(&p))
}

/// `max_j xᵀw_j − xᵀwᵧ`: the dual objective without the entropy term.
/// Zero exactly when `wᵧ` is the most similar center.
pub fn max_violation_loss(x: &[f64], y: usize, bank: &CenterBank) -> Result<f64> {
    check_example(x, y, bank)?;
    require_single_center(bank)?;
    let sims = inner_products(x, bank.data());
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max - sims[y])
}

/// HardTriple loss: class similarity is the max over that class's centers.
///
/// The gradient reaches only the maximizing center of each class; on exact
/// ties the lowest-index center receives it.
pub fn hard_triple_loss(x: &[f64], y: usize, bank: &CenterBank, hp: &HyperParams) -> Result<LossEval> {
    check_example(x, y, bank)?;
    let argmax: Vec<(usize, f64)> = (0..bank.classes())
        .map(|j| hard_argmax(x, bank.class_centers(j)))
        .collect();
    let sims: Vec<f64> = argmax.iter().map(|(_, s)| *s).collect();
    let (value, dsims) = class_nll(&sims, y, hp.lambda, hp.delta);
    let mut grad_x = vec![0.0; x.len()];
    let mut grad_w = vec![0.0; bank.data().len()];
    for (j, ((k, _), g)) in argmax.iter().zip(&dsims).enumerate() {
        linalg::axpy(*g, bank.center(j, *k), &mut grad_x);
        let o = bank.offset(j, *k);
        linalg::axpy(*g, x, &mut grad_w[o..o + x.len()]);
    }
    Ok(LossEval {
        value,
        grad_x,
        grad_w,
    })
}

/// SoftTriple loss: class similarity is the relaxed (entropy-smoothed) max.
///
/// Gradients flow through the assignment distribution `q` as well as the
/// inner products.
pub fn soft_triple_loss(x: &[f64], y: usize, bank: &CenterBank, hp: &HyperParams) -> Result<LossEval> {
    check_example(x, y, bank)?;
    if !(hp.gamma > 0.0) {
        return Err(Error::contract(format!("gamma must be > 0, got {}", hp.gamma)));
    }
    let parts: Vec<(f64, Vec<f64>)> = (0..bank.classes())
        .map(|j| relaxed_parts(x, bank.class_centers(j), hp.gamma))
        .collect();
    let sims: Vec<f64> = parts.iter().map(|(s, _)| *s).collect();
    let (value, dsims) = class_nll(&sims, y, hp.lambda, hp.delta);
    let d = x.len();
    let mut grad_x = vec![0.0; d];
    let mut grad_w = vec![0.0; bank.data().len()];
    for (j, ((_, dk), g)) in parts.iter().zip(&dsims).enumerate() {
        for (k, dsk) in dk.iter().enumerate() {
            let coef = g * dsk;
            linalg::axpy(coef, bank.center(j, k), &mut grad_x);
            let o = bank.offset(j, k);
            linalg::axpy(coef, x, &mut grad_w[o..o + d]);
        }
    }
    Ok(LossEval {
        value,
        grad_x,
        grad_w,
    })
}

/// ProxyNCA: `−log(exp(λwᵧᵀx) / Σ_{j≠y} exp(λw_jᵀx))`. Can be negative.
pub fn proxy_nca_loss(x: &[f64], y: usize, bank: &CenterBank, lambda: f64) -> Result<LossEval> {
    check_example(x, y, bank)?;
    require_single_center(bank)?;
    let sims = inner_products(x, bank.data());
    let negatives: Vec<f64> = sims
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .map(|(_, s)| lambda * s)
        .collect();
    let value = log_sum_exp(&negatives) - lambda * sims[y];
    let p = softmax_weights(&negatives, 1.0);
    let mut dsims = vec![0.0; sims.len()];
    let mut it = p.iter();
    for (j, ds) in dsims.iter_mut().enumerate() {
        *ds = if j == y {
            -lambda
        } else {
            lambda * it.next().expect("one weight per negative class")
        };
    }
    let d = x.len();
    let mut grad_x = vec![0.0; d];
    let mut grad_w = vec![0.0; bank.data().len()];
    for (j, g) in dsims.iter().enumerate() {
        linalg::axpy(*g, bank.center(j, 0), &mut grad_x);
        linalg::axpy(*g, x, &mut grad_w[j * d..(j + 1) * d]);
    }
    Ok(LossEval {
        value,
        grad_x,
        grad_w,
    })
}

/// ProxyNCA clamped at zero. The subgradient at and below zero is zero.
pub fn proxy_nca_hinge(x: &[f64], y: usize, bank: &CenterBank, lambda: f64) -> Result<LossEval> {
    let mut eval = proxy_nca_loss(x, y, bank, lambda)?;
    if eval.value <= 0.0 {
        eval.value = 0.0;
        eval.grad_x.iter_mut().for_each(|g| *g = 0.0);
        eval.grad_w.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(eval)
}

/// Value and gradient of the per-class center regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerEval {
    pub value: f64,
    /// Same `K × d` layout as the input block.
    pub grad: Vec<f64>,
}

/// `Σ_{t<s} sqrt(2 − 2 w^sᵀw^t + ε)` over the `K × d` block of one class.
///
/// For unit centers each term is the distance `‖w^s − w^t‖`, so the sum is an
/// L2,1 penalty that pulls redundant centers onto each other.
pub fn center_regularizer(class_centers: &[f64], dim: usize) -> RegularizerEval {
    assert!(dim > 0 && class_centers.len().is_multiple_of(dim), "center block does not match dimension");
    let k = class_centers.len() / dim;
    let mut value = 0.0;
    let mut grad = vec![0.0; class_centers.len()];
    for t in 0..k {
        let wt = &class_centers[t * dim..(t + 1) * dim];
        for s in t + 1..k {
            let ws = &class_centers[s * dim..(s + 1) * dim];
            let r = ((2.0 - 2.0 * dot(ws, wt)).max(0.0) + REGULARIZER_SMOOTHING).sqrt();
            value += r;
            linalg::axpy(-1.0 / r, ws, &mut grad[t * dim..(t + 1) * dim]);
            linalg::axpy(-1.0 / r, wt, &mut grad[s * dim..(s + 1) * dim]);
        }
    }
    RegularizerEval { value, grad }
}

/// Which per-example loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    HardTriple,
    SoftTriple,
    ProxyNca,
    #[serde(rename = "proxynca-hinge")]
    ProxyNcaHinge,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::HardTriple => "hardtriple",
            LossKind::SoftTriple => "softtriple",
            LossKind::ProxyNca => "proxynca",
            LossKind::ProxyNcaHinge => "proxynca-hinge",
        }
    }

    /// Losses defined only for one center per class.
    pub fn single_center(self) -> bool {
        matches!(self, LossKind::Softmax | LossKind::ProxyNca | LossKind::ProxyNcaHinge)
    }

    pub fn evaluate(self, x: &[f64], y: usize, bank: &CenterBank, hp: &HyperParams) -> Result<LossEval> {
        match self {
            LossKind::Softmax => softmax_norm_loss(x, y, bank, hp.lambda),
            LossKind::HardTriple => hard_triple_loss(x, y, bank, hp),
            LossKind::SoftTriple => soft_triple_loss(x, y, bank, hp),
            LossKind::ProxyNca => proxy_nca_loss(x, y, bank, hp.lambda),
            LossKind::ProxyNcaHinge => proxy_nca_hinge(x, y, bank, hp.lambda),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "softmax" => LossKind::Softmax,
            "hardtriple" => LossKind::HardTriple,
            "softtriple" => LossKind::SoftTriple,
            "proxynca" => LossKind::ProxyNca,
            "proxynca-hinge" => LossKind::ProxyNcaHinge,
            other => return Err(Error::contract(format!("unknown loss '{other}'"))),
        })
    }
}

/// Objective over a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    /// `data_term + reg_term`.
    pub value: f64,
    /// Mean per-example loss.
    pub data_term: f64,
    /// `τ Σ_j R_j / (C K (K−1))`, or 0 when τ = 0.
    pub reg_term: f64,
    /// Gradient of `value` with respect to each example embedding.
    pub grad_x: Vec<Vec<f64>>,
    /// Gradient of `value` with respect to the center bank.
    pub grad_w: Vec<f64>,
}

/// Mean per-example `kind` loss plus the weighted center regularizer.
///
/// Per-example terms are accumulated in batch order.
pub fn objective(
    kind: LossKind,
    batch: &[(&[f64], usize)],
    bank: &CenterBank,
    hp: &HyperParams,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::contract("objective over an empty batch"));
    }
    let k = bank.per_class();
    if hp.tau > 0.0 && k < 2 {
        return Err(Error::contract(
            "K=1 with tau>0: the regularizer denominator C*K*(K-1) is zero",
        ));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut data_term = 0.0;
    let mut grad_x = Vec::with_capacity(batch.len());
    let mut grad_w = vec![0.0; bank.data().len()];
    for (x, y) in batch {
        let eval = kind.evaluate(x, *y, bank, hp)?;
        data_term += eval.value;
        grad_x.push(eval.grad_x.iter().map(|g| g * inv_n).collect());
        linalg::axpy(inv_n, &eval.grad_w, &mut grad_w);
    }
    data_term *= inv_n;

    let mut reg_term = 0.0;
    if hp.tau > 0.0 {
        let scale = hp.tau / (bank.classes() * k * (k - 1)) as f64;
        let block = k * bank.dim();
        for j in 0..bank.classes() {
            let reg = center_regularizer(bank.class_centers(j), bank.dim());
            reg_term += reg.value;
            linalg::axpy(scale, &reg.grad, &mut grad_w[j * block..(j + 1) * block]);
        }
        reg_term *= scale;
    }
    Ok(BatchEval {
        value: data_term + reg_term,
        data_term,
        reg_term,
        grad_x,
        grad_w,
    })
}

/// SoftTriple objective: mean SoftTriple loss plus the center regularizer.
pub fn total_objective(batch: &[(&[f64], usize)], bank: &CenterBank, hp: &HyperParams) -> Result<BatchEval> {
    objective(LossKind::SoftTriple, batch, bank, hp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::normalize;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&v).unwrap().into_inner()
    }

    fn random_bank<R: Rng>(rng: &mut R, c: usize, k: usize, d: usize) -> CenterBank {
        let data = (0..c * k).flat_map(|_| unit(rng, d)).collect();
        CenterBank::new(c, k, d, data).unwrap()
    }

    fn bank2(centers: &[[f64; 2]]) -> CenterBank {
        let data = centers.iter().flatten().copied().collect();
        CenterBank::new(centers.len(), 1, 2, data).unwrap()
    }

    #[test]
    fn triplet_hinge_examples() {
        // Construct unit vectors with prescribed inner products against xi=(1,0).
        let xi = [1.0, 0.0];
        let at = |c: f64| [c, (1.0 - c * c).sqrt()];
        assert_eq!(triplet_hinge(&xi, &at(0.9), &at(0.2), 0.01), 0.0);
        assert!((triplet_hinge(&xi, &at(0.2), &at(0.9), 0.01) - 0.71).abs() < 1e-12);
        assert_eq!(triplet_hinge(&xi, &xi, &xi, 0.0), 0.0);
    }

    #[test]
    fn softmax_norm_symmetry_and_reference() {
        let same = bank2(&[[0.6, 0.8], [0.6, 0.8]]);
        let v = softmax_norm_loss(&[1.0, 0.0], 0, &same, 7.0).unwrap().value;
        assert!((v - 2f64.ln()).abs() < 1e-15);

        let bank = bank2(&[[1.0, 0.0], [-1.0, 0.0]]);
        // ln(1+e^-2), 40-digit reference.
        let v = softmax_norm_loss(&[1.0, 0.0], 0, &bank, 1.0).unwrap().value;
        assert!((v - 0.126_928_011_042_972_5).abs() < 1e-15);
        let dual = smoothed_triplet_dual(&[1.0, 0.0], 0, &bank, 1.0).unwrap();
        assert!((dual - 0.126_928_011_042_972_5).abs() < 1e-15);
        let dual = smoothed_triplet_dual(&[1.0, 0.0], 1, &same, 3.0).unwrap();
        assert!((dual - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_center_losses_reject_multi_center_banks() {
        let mut rng = crate::linalg::rng_for(1, 0);
        let bank = random_bank(&mut rng, 3, 2, 4);
        let x = unit(&mut rng, 4);
        assert!(matches!(softmax_norm_loss(&x, 0, &bank, 1.0), Err(Error::Contract(_))));
        assert!(smoothed_triplet_dual(&x, 0, &bank, 1.0).is_err());
        assert!(proxy_nca_loss(&x, 0, &bank, 1.0).is_err());
        assert!(max_violation_loss(&x, 0, &bank).is_err());
    }

    #[test]
    fn invalid_class_or_dimension_is_rejected() {
        let bank = bank2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(softmax_norm_loss(&[1.0, 0.0], 2, &bank, 1.0).is_err());
        assert!(soft_triple_loss(&[1.0, 0.0, 0.0], 0, &bank, &HyperParams::default()).is_err());
        let single = CenterBank::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert!(hard_triple_loss(&[1.0, 0.0], 0, &single, &HyperParams::default()).is_err());
    }

    #[test]
    fn max_violation_examples() {
        let bank = bank2(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(max_violation_loss(&[1.0, 0.0], 0, &bank).unwrap(), 1.0);
        assert_eq!(max_violation_loss(&[1.0, 0.0], 1, &bank).unwrap(), 0.0);
    }

    #[test]
    fn softmax_over_lambda_approaches_max_violation() {
        let mut rng = crate::linalg::rng_for(2, 0);
        for _ in 0..50 {
            let c = rng.random_range(2..8);
            let bank = random_bank(&mut rng, c, 1, 5);
            let x = unit(&mut rng, 5);
            let y = rng.random_range(0..c);
            let lambda = 1e3;
            let smooth = softmax_norm_loss(&x, y, &bank, lambda).unwrap().value / lambda;
            let hard = max_violation_loss(&x, y, &bank).unwrap();
            assert!(smooth >= hard - 1e-12);
            assert!(smooth - hard <= (c as f64).ln() / lambda + 1e-12);
        }
    }

    #[test]
    fn hard_similarity_examples() {
        let x = [1.0, 0.0];
        assert_eq!(class_similarity_hard(&x, &[0.6, 0.8]).value(), 0.6);
        assert_eq!(class_similarity_hard(&x, &[1.0, 0.0, 0.0, 1.0]).value(), 1.0);
        let mut rng = crate::linalg::rng_for(3, 0);
        for _ in 0..20 {
            let x = unit(&mut rng, 6);
            let centers: Vec<f64> = (0..5).flat_map(|_| unit(&mut rng, 6)).collect();
            let mut brute = f64::NEG_INFINITY;
            for w in centers.chunks(6) {
                let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
                if s > brute {
                    brute = s;
                }
            }
            assert_eq!(class_similarity_hard(&x, &centers).value(), brute);
        }
    }

    #[test]
    fn relaxed_similarity_examples() {
        let x = [1.0, 0.0];
        let s = class_similarity_relaxed(&x, &[1.0, 0.0, 0.0, 1.0], 0.1).unwrap();
        assert!((s.value() - 0.999_954_602_131_297_6).abs() < 1e-15);

        let w = [0.6, 0.8];
        let repeated: Vec<f64> = w.iter().cycle().take(8).copied().collect();
        assert_eq!(class_similarity_relaxed(&x, &repeated, 0.1).unwrap().value(), 0.6);

        let centers = [0.6, 0.8, 0.0, 1.0, -1.0, 0.0];
        let mean = (0.6 + 0.0 - 1.0) / 3.0;
        let hot = class_similarity_relaxed(&x, &centers, 1e6).unwrap().value();
        assert!((hot - mean).abs() < 1e-6);

        assert!(class_similarity_relaxed(&x, &centers, 0.0).is_err());
        assert!(class_similarity_relaxed(&x, &centers, -1.0).is_err());
    }

    #[test]
    fn hard_triple_symmetric_case_is_log_c() {
        // Every class's best center is the example itself.
        let x = [0.0, 1.0];
        let data = vec![0.0, 1.0, 1.0, 0.0, 0.6, 0.8, 0.0, 1.0, 0.0, 1.0, -1.0, 0.0];
        let bank = CenterBank::new(3, 2, 2, data).unwrap();
        let hp = HyperParams {
            delta: 0.0,
            ..HyperParams::default()
        };
        let v = hard_triple_loss(&x, 1, &bank, &hp).unwrap().value;
        assert!((v - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn hard_triple_ties_go_to_lowest_index() {
        let x = [1.0, 0.0];
        let data = vec![0.6, 0.8, 0.6, -0.8, -1.0, 0.0, 0.0, 1.0];
        let bank = CenterBank::new(2, 2, 2, data).unwrap();
        let eval = hard_triple_loss(&x, 0, &bank, &HyperParams::default()).unwrap();
        assert!(eval.grad_w[0..2].iter().any(|g| *g != 0.0));
        assert!(eval.grad_w[2..4].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn soft_triple_tends_to_hard_triple_as_gamma_vanishes() {
        let mut rng = crate::linalg::rng_for(4, 0);
        for _ in 0..20 {
            let bank = random_bank(&mut rng, 4, 3, 6);
            let x = unit(&mut rng, 6);
            let hard_hp = HyperParams::default();
            let soft_hp = HyperParams {
                gamma: 1e-4,
                ..hard_hp
            };
            let hard = hard_triple_loss(&x, 1, &bank, &hard_hp).unwrap().value;
            let soft = soft_triple_loss(&x, 1, &bank, &soft_hp).unwrap().value;
            assert!((hard - soft).abs() <= 1e-3, "{hard} vs {soft}");
        }
    }

    #[test]
    fn proxy_nca_examples() {
        let lambda = 1.0;
        let equal = bank2(&[[0.6, 0.8], [0.6, -0.8]]);
        let v = proxy_nca_loss(&[1.0, 0.0], 0, &equal, lambda).unwrap().value;
        assert!(v.abs() < 1e-15);

        let bank = bank2(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        // -log(e / (1 + e^-1)), 40-digit reference.
        let v = proxy_nca_loss(&[1.0, 0.0], 0, &bank, lambda).unwrap().value;
        assert!((v + 0.686_738_312_481_777_2).abs() < 1e-15);
        let hinge = proxy_nca_hinge(&[1.0, 0.0], 0, &bank, lambda).unwrap();
        assert_eq!(hinge.value, 0.0);
        assert!(hinge.grad_x.iter().all(|g| *g == 0.0));

        let far = proxy_nca_loss(&[1.0, 0.0], 0, &bank, 20.0).unwrap().value;
        assert!(far < -10.0);
    }

    #[test]
    fn regularizer_examples() {
        let same = center_regularizer(&[0.6, 0.8, 0.6, 0.8], 2);
        assert!(same.value.abs() <= 1e-6);
        let ortho = center_regularizer(&[1.0, 0.0, 0.0, 1.0], 2);
        assert!((ortho.value - std::f64::consts::SQRT_2).abs() < 1e-12);
        let single = center_regularizer(&[1.0, 0.0], 2);
        assert_eq!(single.value, 0.0);
        assert_eq!(single.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn objective_rejects_single_center_regularizer() {
        let bank = bank2(&[[1.0, 0.0], [0.0, 1.0]]);
        let x = [1.0, 0.0];
        let hp = HyperParams {
            centers_per_class: 1,
            ..HyperParams::default()
        };
        assert!(total_objective(&[(&x, 0)], &bank, &hp).is_err());
        assert!(hp.validate().is_err());
        let hp = HyperParams { tau: 0.0, ..hp };
        assert!(total_objective(&[(&x, 0)], &bank, &hp).is_ok());
        assert!(total_objective(&[], &bank, &hp).is_err());
    }

    #[test]
    fn objective_of_one_example_is_loss_plus_regularizer() {
        let mut rng = crate::linalg::rng_for(5, 0);
        let bank = random_bank(&mut rng, 3, 4, 5);
        let x = unit(&mut rng, 5);
        let hp = HyperParams::default();
        let total = total_objective(&[(&x, 2)], &bank, &hp).unwrap();
        let loss = soft_triple_loss(&x, 2, &bank, &hp).unwrap().value;
        let reg: f64 = (0..3)
            .map(|j| center_regularizer(bank.class_centers(j), 5).value)
            .sum::<f64>()
            * hp.tau
            / (3.0 * 4.0 * 3.0);
        assert!((total.value - (loss + reg)).abs() < 1e-14);
    }

    #[test]
    fn loss_kind_round_trips_through_names() {
        for kind in [
            LossKind::Softmax,
            LossKind::HardTriple,
            LossKind::SoftTriple,
            LossKind::ProxyNca,
            LossKind::ProxyNcaHinge,
        ] {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("triplet".parse::<LossKind>().is_err());
    }

    fn instance() -> impl Strategy<Value = (u64, usize, usize, usize)> {
        (any::<u64>(), 2usize..8, 1usize..5, 2usize..8)
    }

    proptest! {
        #[test]
        fn dual_matches_softmax((seed, c, _k, d) in instance(), lambda in 0.1f64..50.0) {
            let mut rng = crate::linalg::rng_for(seed, 0);
            let bank = random_bank(&mut rng, c, 1, d);
            let x = unit(&mut rng, d);
            let y = rng.random_range(0..c);
            let a = softmax_norm_loss(&x, y, &bank, lambda).unwrap().value;
            let b = smoothed_triplet_dual(&x, y, &bank, lambda).unwrap();
            prop_assert!((a - b).abs() <= 1e-10);
        }

        #[test]
        fn single_center_reductions((seed, c, _k, d) in instance(), lambda in 0.1f64..50.0) {
            let mut rng = crate::linalg::rng_for(seed, 0);
            let bank = random_bank(&mut rng, c, 1, d);
            let x = unit(&mut rng, d);
            let y = rng.random_range(0..c);
            let hp = HyperParams { lambda, delta: 0.0, tau: 0.0, centers_per_class: 1, ..HyperParams::default() };
            let base = softmax_norm_loss(&x, y, &bank, lambda).unwrap();
            let soft = soft_triple_loss(&x, y, &bank, &hp).unwrap();
            let hard = hard_triple_loss(&x, y, &bank, &hp).unwrap();
            prop_assert!((soft.value - base.value).abs() <= 1e-12);
            prop_assert!((hard.value - base.value).abs() <= 1e-12);
        }

        #[test]
        fn relaxed_similarity_sandwich((seed, _c, k, d) in instance(), gamma in 1e-3f64..2.0) {
            let mut rng = crate::linalg::rng_for(seed, 0);
            let x = unit(&mut rng, d);
            let centers: Vec<f64> = (0..k).flat_map(|_| unit(&mut rng, d)).collect();
            let hard = class_similarity_hard(&x, &centers).value();
            let soft = class_similarity_relaxed(&x, &centers, gamma).unwrap().value();
            prop_assert!(soft <= hard);
            prop_assert!(soft >= hard - gamma * (k as f64).ln());
        }

        #[test]
        fn soft_triple_nondecreasing_in_margin((seed, c, k, d) in instance()) {
            let mut rng = crate::linalg::rng_for(seed, 0);
            let bank = random_bank(&mut rng, c, k, d);
            let x = unit(&mut rng, d);
            let y = rng.random_range(0..c);
            let values: Vec<f64> = [0.0, 0.01, 0.1].iter().map(|delta| {
                let hp = HyperParams { delta: *delta, ..HyperParams::default() };
                soft_triple_loss(&x, y, &bank, &hp).unwrap().value
            }).collect();
            prop_assert!(values[0] <= values[1] && values[1] <= values[2]);
        }

        #[test]
        fn regularizer_permutation_invariant((seed, _c, k, d) in instance()) {
            let mut rng = crate::linalg::rng_for(seed, 0);
            let mut rows: Vec<Vec<f64>> = (0..k + 1).map(|_| unit(&mut rng, d)).collect();
            let before = center_regularizer(&rows.concat(), d).value;
            rows.reverse();
            rows.rotate_left(1);
            let after = center_regularizer(&rows.concat(), d).value;
            prop_assert!((before - after).abs() <= 1e-12);
        }
    }
}
