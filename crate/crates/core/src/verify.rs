//! Randomized property suites run by `softtriple verify`.
//!
//! Each suite draws its own instances from a seeded stream and stops at the
//! first counterexample, which is reported with its inputs.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, dot, normalize, rng_for, streams};
use crate::losses::{
    center_regularizer, class_similarity_hard, class_similarity_relaxed, hard_triple_loss,
    smoothed_triplet_dual, soft_triple_loss, softmax_norm_loss, total_objective, CenterBank,
    HyperParams, LossEval,
};
use crate::model::{Architecture, EmbeddingModel};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const REDUCTION_TOL: f64 = 1e-12;
/// Instances whose top two within-class similarities are closer than this are
/// skipped by the HardTriple gradient check.
pub const TIE_GAP: f64 = 1e-5;
/// The pairwise center distance `sqrt(2 − 2wᵀw′)` has curvature ~1/r, so the
/// regularizer gradient check skips banks with a pair of centers closer than
/// this.
pub const MIN_CENTER_SEPARATION: f64 = 0.05;

/// Deliberate corruption used to confirm the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// Negate every analytic gradient before comparing with finite differences.
    GradientSign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub passed: bool,
    /// Largest observed error (or violation) over all trials.
    pub max_error: f64,
    pub counterexample: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    pub fault: Fault,
}

struct Suite {
    name: &'static str,
    trials: usize,
    max_error: f64,
    counterexample: Option<String>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            trials: 0,
            max_error: 0.0,
            counterexample: None,
        }
    }

    /// Records one trial; returns false once a counterexample exists.
    fn record(&mut self, error: f64, tol: f64, describe: impl FnOnce() -> String) -> bool {
        self.trials += 1;
        self.max_error = self.max_error.max(error);
        if !(error <= tol) && self.counterexample.is_none() {
            self.counterexample = Some(describe());
        }
        self.counterexample.is_none()
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            trials: self.trials,
            passed: self.counterexample.is_none(),
            max_error: self.max_error,
            counterexample: self.counterexample,
        }
    }
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u.into_inner();
        }
    }
}

pub fn random_bank<R: Rng>(rng: &mut R, classes: usize, per_class: usize, dim: usize) -> CenterBank {
    let data = (0..classes * per_class).flat_map(|_| random_unit(rng, dim)).collect();
    CenterBank::new(classes, per_class, dim, data).expect("valid shape")
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Gradient norm below which errors are measured absolutely: a loss of
/// magnitude ~10 evaluated in f64 carries ~1e-9 of round-off in a central
/// difference with step 1e-6, which swamps a vanishing gradient.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// `‖a − b‖ / max(‖a‖, ‖b‖, REL_ERROR_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    linalg::norm(&diff) / linalg::norm(a).max(linalg::norm(b)).max(REL_ERROR_FLOOR)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn dual_equivalence(rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("dual-equivalence");
    for _ in 0..1000 {
        let c = rng.random_range(2..=10);
        let d = rng.random_range(1..=8);
        let lambda = rng.random_range(0.1..=50.0);
        let bank = random_bank(rng, c, 1, d);
        let x = random_unit(rng, d);
        let y = rng.random_range(0..c);
        let primal = softmax_norm_loss(&x, y, &bank, lambda).expect("valid instance").value;
        let dual = smoothed_triplet_dual(&x, y, &bank, lambda).expect("valid instance");
        let ok = suite.record((primal - dual).abs(), EQUIVALENCE_TOL, || {
            format!(
                "x={} y={y} lambda={lambda} W={}: softmax={primal:.17e} dual={dual:.17e}",
                fmt_vec(&x),
                fmt_vec(bank.data())
            )
        });
        if !ok {
            break;
        }
    }
    suite.finish()
}

fn hard_ties(x: &[f64], bank: &CenterBank) -> bool {
    (0..bank.classes()).any(|j| {
        let mut s: Vec<f64> = bank.class_centers(j).chunks(x.len()).map(|w| dot(x, w)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s.len() > 1 && s[0] - s[1] < TIE_GAP
    })
}

fn has_close_pair(centers: &[f64], dim: usize) -> bool {
    let rows: Vec<&[f64]> = centers.chunks(dim).collect();
    (0..rows.len()).any(|t| {
        (t + 1..rows.len()).any(|s| linalg::squared_distance(rows[t], rows[s]).sqrt() < MIN_CENTER_SEPARATION)
    })
}

fn well_separated_bank<R: Rng>(rng: &mut R, classes: usize, per_class: usize, dim: usize) -> CenterBank {
    loop {
        let bank = random_bank(rng, classes, per_class, dim);
        if (0..classes).all(|j| !has_close_pair(bank.class_centers(j), dim)) {
            return bank;
        }
    }
}

fn check_loss_gradients(
    suite: &mut Suite,
    label: &str,
    x: &[f64],
    bank: &CenterBank,
    fault: Fault,
    loss: impl Fn(&[f64], &CenterBank) -> LossEval,
) -> bool {
    let mut eval = loss(x, bank);
    if fault == Fault::GradientSign {
        eval.grad_x.iter_mut().for_each(|g| *g = -*g);
        eval.grad_w.iter_mut().for_each(|g| *g = -*g);
    }
    let fd_x = numeric_gradient(x, |xp| loss(xp, bank).value);
    let fd_w = numeric_gradient(bank.data(), |wp| {
        let perturbed = CenterBank::new(bank.classes(), bank.per_class(), bank.dim(), wp.to_vec()).expect("same shape");
        loss(x, &perturbed).value
    });
    let err = relative_error(&eval.grad_x, &fd_x).max(relative_error(&eval.grad_w, &fd_w));
    suite.record(err, GRAD_REL_TOL, || {
        format!(
            "{label}: x={} W={}: expected grad_x={} got {}",
            fmt_vec(x),
            fmt_vec(bank.data()),
            fmt_vec(&fd_x),
            fmt_vec(&eval.grad_x)
        )
    })
}

fn random_hp<R: Rng>(rng: &mut R, k: usize) -> HyperParams {
    HyperParams {
        lambda: rng.random_range(1.0..=20.0),
        gamma: rng.random_range(0.05..=1.0),
        delta: rng.random_range(0.0..=0.1),
        tau: rng.random_range(0.0..=0.5),
        centers_per_class: k,
    }
}

fn gradient_fidelity(rng: &mut ChaCha8Rng, fault: Fault) -> SuiteReport {
    let mut suite = Suite::new("gradient-fidelity");
    let mut alive = true;

    for _ in 0..100 {
        let (c, d) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let bank = random_bank(rng, c, 1, d);
        let x = random_unit(rng, d);
        let y = rng.random_range(0..c);
        let lambda = rng.random_range(1.0..=20.0);
        alive &= check_loss_gradients(&mut suite, "softmax", &x, &bank, fault, |x, w| {
            softmax_norm_loss(x, y, w, lambda).expect("valid instance")
        });
        if !alive {
            return suite.finish();
        }
    }

    for _ in 0..100 {
        let (c, k, d) = (rng.random_range(2..=5), rng.random_range(1..=4), rng.random_range(2..=6));
        let hp = random_hp(rng, k);
        let (bank, x) = loop {
            let bank = random_bank(rng, c, k, d);
            let x = random_unit(rng, d);
            if !hard_ties(&x, &bank) {
                break (bank, x);
            }
        };
        let y = rng.random_range(0..c);
        alive &= check_loss_gradients(&mut suite, "hardtriple", &x, &bank, fault, |x, w| {
            hard_triple_loss(x, y, w, &hp).expect("valid instance")
        });
        if !alive {
            return suite.finish();
        }
    }

    for _ in 0..100 {
        let (c, k, d) = (rng.random_range(2..=5), rng.random_range(1..=4), rng.random_range(2..=8));
        let hp = random_hp(rng, k);
        let bank = random_bank(rng, c, k, d);
        let x = random_unit(rng, d);
        let y = rng.random_range(0..c);
        alive &= check_loss_gradients(&mut suite, "softtriple", &x, &bank, fault, |x, w| {
            soft_triple_loss(x, y, w, &hp).expect("valid instance")
        });
        if !alive {
            return suite.finish();
        }
    }

    for _ in 0..100 {
        let (k, d) = (rng.random_range(1..=6), rng.random_range(2..=6));
        let centers = well_separated_bank(rng, 1, k, d).data().to_vec();
        let mut reg = center_regularizer(&centers, d);
        if fault == Fault::GradientSign {
            reg.grad.iter_mut().for_each(|g| *g = -*g);
        }
        let fd = numeric_gradient(&centers, |w| center_regularizer(w, d).value);
        let err = relative_error(&reg.grad, &fd);
        alive &= suite.record(err, GRAD_REL_TOL, || {
            format!(
                "regularizer: W={}: expected {} got {}",
                fmt_vec(&centers),
                fmt_vec(&fd),
                fmt_vec(&reg.grad)
            )
        });
        if !alive {
            return suite.finish();
        }
    }

    for _ in 0..100 {
        if !objective_gradient_trial(rng, &mut suite, fault) {
            return suite.finish();
        }
    }
    suite.finish()
}

/// Total objective through an MLP: gradients for embeddings, centers and every
/// model parameter on a 4-example batch with C=3, K=2, d=4.
fn objective_gradient_trial(rng: &mut ChaCha8Rng, suite: &mut Suite, fault: Fault) -> bool {
    let (input, hidden, dim, classes, k) = (5, 6, 4, 3, 2);
    let hp = random_hp(rng, k);
    let (model, feats) = loop {
        let mut model = EmbeddingModel::new(Architecture::Mlp { hidden }, input, dim, rng).expect("valid model");
        for layer in model.layers_mut() {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        let feats: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..input).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let first = &model.layers()[0];
        let near_kink = feats.iter().any(|f| {
            first
                .weight
                .matvec(f)
                .iter()
                .zip(&first.bias)
                .any(|(a, b)| (a + b).abs() < 1e-4)
        });
        if !near_kink {
            break (model, feats);
        }
    };
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..classes)).collect();
    let bank = well_separated_bank(rng, classes, k, dim);

    let value = |m: &EmbeddingModel, w: &CenterBank| -> f64 {
        let embs: Vec<Vec<f64>> = feats.iter().map(|f| m.forward(f).expect("nonzero").into_inner()).collect();
        let batch: Vec<(&[f64], usize)> = embs.iter().map(|e| e.as_slice()).zip(labels.iter().copied()).collect();
        total_objective(&batch, w, &hp).expect("valid batch").value
    };

    let embs: Vec<Vec<f64>> = feats.iter().map(|f| model.forward(f).expect("nonzero").into_inner()).collect();
    let batch: Vec<(&[f64], usize)> = embs.iter().map(|e| e.as_slice()).zip(labels.iter().copied()).collect();
    let eval = total_objective(&batch, &bank, &hp).expect("valid batch");
    let mut grads = model.zero_grad();
    for (f, gx) in feats.iter().zip(&eval.grad_x) {
        let (g, _) = model.backward(f, gx).expect("nonzero output");
        grads.accumulate(1.0, &g);
    }
    let mut analytic: Vec<f64> = grads.tensors().concat();
    analytic.extend_from_slice(&eval.grad_w);
    if fault == Fault::GradientSign {
        analytic.iter_mut().for_each(|g| *g = -*g);
    }

    let flat: Vec<f64> = model.tensors().concat();
    let fd_model = numeric_gradient(&flat, |p| {
        let mut m = model.clone();
        let mut offset = 0;
        for t in m.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&p[offset..offset + n]);
            offset += n;
        }
        value(&m, &bank)
    });
    let fd_w = numeric_gradient(bank.data(), |w| {
        value(&model, &CenterBank::new(classes, k, dim, w.to_vec()).expect("same shape"))
    });
    let mut numeric = fd_model;
    numeric.extend(fd_w);
    let err = relative_error(&analytic, &numeric);
    suite.record(err, GRAD_REL_TOL, || {
        let mut s = String::new();
        let _ = write!(s, "total objective through model: hp={hp:?} labels={labels:?} ");
        let _ = write!(s, "expected {} got {}", fmt_vec(&numeric), fmt_vec(&analytic));
        s
    })
}

fn reductions(rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("reductions");
    for _ in 0..1000 {
        let (c, d) = (rng.random_range(2..=10), rng.random_range(1..=8));
        let lambda = rng.random_range(0.1..=50.0);
        let hp = HyperParams {
            lambda,
            gamma: rng.random_range(0.01..=1.0),
            delta: 0.0,
            tau: 0.0,
            centers_per_class: 1,
        };
        let bank = random_bank(rng, c, 1, d);
        let x = random_unit(rng, d);
        let y = rng.random_range(0..c);
        let base = softmax_norm_loss(&x, y, &bank, lambda).expect("valid instance").value;
        let soft = soft_triple_loss(&x, y, &bank, &hp).expect("valid instance").value;
        let hard = hard_triple_loss(&x, y, &bank, &hp).expect("valid instance").value;
        let err = (soft - base).abs().max((hard - base).abs());
        if !suite.record(err, REDUCTION_TOL, || {
            format!("x={} y={y} W={}: softmax={base:.17e} softtriple={soft:.17e} hardtriple={hard:.17e}", fmt_vec(&x), fmt_vec(bank.data()))
        }) {
            return suite.finish();
        }

        // Similarity sandwich on a multi-center class.
        let k = rng.random_range(1..=10);
        let centers: Vec<f64> = (0..k).flat_map(|_| random_unit(rng, d)).collect();
        let gamma = rng.random_range(1e-3..=2.0);
        let s_hard = class_similarity_hard(&x, &centers).value();
        let s_soft = class_similarity_relaxed(&x, &centers, gamma).expect("gamma > 0").value();
        let lower = s_hard - gamma * (k as f64).ln();
        let violation = (s_soft - s_hard).max(lower - s_soft).max(0.0);
        if !suite.record(violation, REDUCTION_TOL, || {
            format!("sandwich: x={} centers={} gamma={gamma}: hard={s_hard:.17e} relaxed={s_soft:.17e}", fmt_vec(&x), fmt_vec(&centers))
        }) {
            return suite.finish();
        }
    }
    suite.finish()
}

/// Unit vector at chord distance `t` from unit `w`.
fn point_near<R: Rng>(rng: &mut R, w: &[f64], t: f64) -> Vec<f64> {
    let v = loop {
        let mut v = random_unit(rng, w.len());
        let proj = dot(&v, w);
        linalg::axpy(-proj, w, &mut v);
        if let Ok(u) = normalize(&v) {
            break u.into_inner();
        }
    };
    let theta = 2.0 * (t / 2.0).asin();
    w.iter().zip(&v).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect()
}

/// One instance satisfying the preconditions of the center-to-example margin
/// transfer: `x_i`, `x_j` within `ε` of their class center `w_a`, `x_k`
/// within `ε` of another class's center `w_b`, and `x_iᵀw_a − x_iᵀw_b ≥ δ`.
pub struct TransferInstance {
    pub xi: Vec<f64>,
    pub xj: Vec<f64>,
    pub xk: Vec<f64>,
    pub wa: Vec<f64>,
    pub wb: Vec<f64>,
    pub epsilon: f64,
    pub delta: f64,
}

pub fn transfer_instance<R: Rng>(rng: &mut R) -> TransferInstance {
    loop {
        let d = rng.random_range(2..=8);
        let epsilon = rng.random_range(1e-3..=0.5);
        let wa = random_unit(rng, d);
        let wb = random_unit(rng, d);
        let near = |rng: &mut R, w: &[f64]| {
            let t = rng.random_range(0.0..=epsilon);
            point_near(rng, w, t)
        };
        let xi = near(rng, &wa);
        let xj = near(rng, &wa);
        let xk = near(rng, &wb);
        let within = |x: &[f64], w: &[f64]| linalg::squared_distance(x, w).sqrt() <= epsilon;
        if !(within(&xi, &wa) && within(&xj, &wa) && within(&xk, &wb)) {
            continue;
        }
        let margin = dot(&xi, &wa) - dot(&xi, &wb);
        if margin < 0.0 {
            continue;
        }
        let delta = margin * rng.random_range(0.0..=1.0);
        if dot(&xi, &wa) - dot(&xi, &wb) >= delta {
            return TransferInstance {
                xi,
                xj,
                xk,
                wa,
                wb,
                epsilon,
                delta,
            };
        }
    }
}

fn margin_transfer(rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("margin-transfer");
    for _ in 0..10_000 {
        let inst = transfer_instance(rng);
        let lhs = dot(&inst.xi, &inst.xj) - dot(&inst.xi, &inst.xk);
        let bound = inst.delta - 2.0 * inst.epsilon;
        let violation = (bound - lhs).max(0.0);
        if !suite.record(violation, 0.0, || {
            format!(
                "xi={} xj={} xk={} wa={} wb={} eps={} delta={}: {lhs:.17e} < {bound:.17e}",
                fmt_vec(&inst.xi),
                fmt_vec(&inst.xj),
                fmt_vec(&inst.xk),
                fmt_vec(&inst.wa),
                fmt_vec(&inst.wb),
                inst.epsilon,
                inst.delta
            )
        }) {
            break;
        }
    }
    suite.finish()
}

fn margin_monotonicity(rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut suite = Suite::new("margin-monotonicity");
    for _ in 0..1000 {
        let (c, k, d) = (rng.random_range(2..=6), rng.random_range(1..=5), rng.random_range(2..=8));
        let bank = random_bank(rng, c, k, d);
        let x = random_unit(rng, d);
        let y = rng.random_range(0..c);
        let base = random_hp(rng, k);
        let values: Vec<f64> = [0.0, 0.01, 0.1]
            .iter()
            .map(|delta| {
                let hp = HyperParams { delta: *delta, ..base };
                soft_triple_loss(&x, y, &bank, &hp).expect("valid instance").value
            })
            .collect();
        let violation = (values[0] - values[1]).max(values[1] - values[2]).max(0.0);
        if !suite.record(violation, 0.0, || format!("x={} y={y} W={}: losses {values:?}", fmt_vec(&x), fmt_vec(bank.data()))) {
            break;
        }
    }
    suite.finish()
}

/// Runs every suite. Each suite uses its own PRNG stream derived from `seed`.
pub fn run_all(config: &VerifyConfig) -> Vec<SuiteReport> {
    let stream = |i: u64| rng_for(config.seed, streams::VERIFY * 100 + i);
    vec![
        dual_equivalence(&mut stream(0)),
        gradient_fidelity(&mut stream(1), config.fault),
        reductions(&mut stream(2)),
        margin_transfer(&mut stream(3)),
        margin_monotonicity(&mut stream(4)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_suite() {
        let reports = run_all(&VerifyConfig { seed: 0, fault: Fault::None });
        assert!(reports.len() >= 4);
        for r in &reports {
            assert!(r.passed, "{}: {:?}", r.name, r.counterexample);
        }
    }

    #[test]
    fn sign_flip_is_caught_by_gradient_suite() {
        let reports = run_all(&VerifyConfig {
            seed: 0,
            fault: Fault::GradientSign,
        });
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["gradient-fidelity"]);
    }

    #[test]
    fn point_near_hits_requested_distance() {
        let mut rng = rng_for(1, 0);
        let w = random_unit(&mut rng, 5);
        let x = point_near(&mut rng, &w, 0.3);
        assert!((linalg::norm(&x) - 1.0).abs() < 1e-12);
        assert!((linalg::squared_distance(&x, &w).sqrt() - 0.3).abs() < 1e-12);
    }
}
