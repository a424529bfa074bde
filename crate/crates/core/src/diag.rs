//! Numerical verifiers: the rank-one effective-step-size update and its
//! order-of-error check, the norm-matching controller for the
//! "no decay (normalized)" control, nuclear-norm traces, margin loss, and
//! the layer-wise generalization-bound terms.

use crate::model::Model;
use crate::svd::{nuclear_norm, spectral_norm};
use crate::tensor::{Error, Result, Tensor};

/// Mean over factorized layers of η/‖recompose‖_F²; zero-norm layers are
/// excluded with a warning.
pub fn effective_step_size(model: &Model, lr: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for fp in model.factored() {
        let norm2 = fp.recompose().frobenius_norm().powi(2);
        if norm2 == 0.0 {
            eprintln!("warning: layer {} has zero norm; excluded from effective step size", fp.name);
            continue;
        }
        sum += lr / norm2;
        count += 1;
    }
    assert!(count > 0, "effective step size needs at least one factorized layer");
    sum / count as f64
}

/// The first-order prediction for the normalized weight direction after one
/// factored SGD step: ŵ − (η/‖W‖_F²)(I − ŵŵᵀ)·vec(∇̂), with
/// ∇̂ = ∇_Ŵ·V·Vᵀ + U·Uᵀ·∇_Ŵ and ∇_Ŵ = ‖W‖_F·grad_W. Vectors are
/// column-major vectorizations of the m×n matrices.
pub fn claim1_predicted_direction(
    u: &Tensor,
    v: &Tensor,
    grad_w: &Tensor,
    lr: f64,
) -> Result<Tensor> {
    assert!(lr > 0.0);
    let w = u.matmul_nt(v);
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::InvalidArg("composed matrix is zero".into()));
    }
    let w_hat = w.scale(1.0 / norm).vec_cm();
    let grad_hat_w = grad_w.scale(norm);
    // ∇̂ = ∇_Ŵ·(V·Vᵀ) + (U·Uᵀ)·∇_Ŵ
    let gvvt = grad_hat_w.matmul(v).matmul_nt(v);
    let uutg = u.matmul(&u.matmul_tn(&grad_hat_w));
    let g = gvvt.add(&uutg).vec_cm();
    // (I − ŵŵᵀ)·g = g − ŵ·(ŵᵀg)
    let align = w_hat.dot(&g);
    let mut step = g.clone();
    step.add_scaled(&w_hat, -align);
    let mut next = w_hat;
    next.add_scaled(&step, -lr / (norm * norm));
    Ok(next)
}

/// For each η: performs the exact factored updates U ← U − η·∇W·V,
/// V ← V − η·∇Wᵀ·U, recomposes and normalizes, and measures the deviation
/// from the first-order prediction. Returns the least-squares slope of
/// log error vs log η, or None when every error is below 1e-14 (exact).
pub fn claim1_order_check(
    u: &Tensor,
    v: &Tensor,
    grad_w: &Tensor,
    lrs: &[f64],
) -> Result<Option<f64>> {
    assert!(lrs.len() >= 2, "need at least two step sizes to fit a slope");
    let mut points = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        assert!(lr > 0.0 && lr <= 1e-2, "step sizes must be in (0, 1e-2]");
        let predicted = claim1_predicted_direction(u, v, grad_w, lr)?;
        let mut u1 = u.clone();
        u1.add_scaled(&grad_w.matmul(v), -lr);
        let mut v1 = v.clone();
        v1.add_scaled(&grad_w.matmul_tn(u), -lr); // ∇Wᵀ·U, n×r
        let w1 = u1.matmul_nt(&v1);
        let n1 = w1.frobenius_norm();
        if n1 == 0.0 {
            return Err(Error::InvalidArg("updated matrix collapsed to zero".into()));
        }
        let actual = w1.scale(1.0 / n1).vec_cm();
        let e = actual.sub(&predicted).frobenius_norm();
        points.push((lr.ln(), e));
    }
    if points.iter().all(|&(_, e)| e < 1e-14) {
        return Ok(None);
    }
    // least-squares slope of ln e over ln η
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, e) in &points {
        let y = e.max(1e-300).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    Ok(Some((n * sxy - sx * sy) / (n * sxx - sx * sx)))
}

/// Rescales U and V of each factorized layer by √(targetᵢ/currentᵢ) so the
/// recomposed Frobenius norms match the reference run. The function of the
/// following normalized layer is unchanged by the rescale.
pub fn norm_matching_controller(model: &mut Model, targets: &[f64]) -> Result<()> {
    let currents: Vec<f64> = model
        .factored()
        .iter()
        .map(|fp| fp.recompose().frobenius_norm())
        .collect();
    assert_eq!(currents.len(), targets.len(), "one target per factorized layer");
    if let Some(i) = currents.iter().position(|&c| c == 0.0) {
        return Err(Error::InvalidArg(format!("factorized layer {i} has zero norm")));
    }
    let mut idx = 0;
    for slot in model.param_slots() {
        if let crate::model::ParamSlot::Factored(fp) = slot {
            let s = (targets[idx] / currents[idx]).sqrt();
            fp.scale_outer_factors(s);
            idx += 1;
        }
    }
    Ok(())
}

/// Per-layer recomposed norms, in the controller's traversal order.
pub fn factored_norms(model: &Model) -> Vec<f64> {
    model.factored().iter().map(|fp| fp.recompose().frobenius_norm()).collect()
}

/// (mean ‖UᵢVᵢᵀ‖_*, mean (1/2)(‖Uᵢ‖_F² + ‖Vᵢ‖_F²)) across d = 0
/// factorized layers.
pub fn nuclear_trace(model: &Model) -> (f64, f64) {
    let fps = model.factored();
    assert!(!fps.is_empty(), "nuclear trace needs factorized layers");
    let mut nuc = 0.0;
    let mut bound = 0.0;
    for fp in &fps {
        assert_eq!(fp.depth(), 0, "nuclear trace requires d = 0");
        nuc += nuclear_norm(&fp.recompose());
        bound += 0.5 * (fp.u.frobenius_norm().powi(2) + fp.v.frobenius_norm().powi(2));
    }
    (nuc / fps.len() as f64, bound / fps.len() as f64)
}

/// Inputs to the layer-wise margin-bound terms.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    /// Recomposed per-layer weight matrices.
    pub weights: Vec<Tensor>,
    /// Classification margin γ > 0.
    pub gamma: f64,
    /// Bound on the input norm.
    pub b: f64,
    /// Sample count |S| ≥ 1.
    pub samples: usize,
    /// Hidden width m.
    pub width: usize,
}

pub const BOUND_DELTA: f64 = 0.01;

fn bound_preamble(inputs: &BoundInputs) -> Result<(f64, f64, f64)> {
    if inputs.gamma <= 0.0 {
        return Err(Error::InvalidArg("margin must be positive".into()));
    }
    assert!(inputs.samples >= 1 && !inputs.weights.is_empty());
    let l = inputs.weights.len() as f64;
    let s = inputs.samples as f64;
    let tail = (l * s / BOUND_DELTA).ln();
    Ok((l, s, tail))
}

/// Relative rank-based bound term (constants set to 1):
/// √((B²·L³·m·σ^{2L}·r·log(L·m)·∏‖Wᵢ‖₂² + log(L|S|/δ)) / (γ²|S|)),
/// σ = maxᵢ‖Wᵢ‖₂.
pub fn cor1_bound(inputs: &BoundInputs, r: usize) -> Result<f64> {
    let (l, s, tail) = bound_preamble(inputs)?;
    let spectrals: Vec<f64> = inputs.weights.iter().map(spectral_norm).collect();
    let sigma = spectrals.iter().fold(0.0f64, |a, &b| a.max(b));
    let prod: f64 = spectrals.iter().map(|x| x * x).product();
    let m = inputs.width as f64;
    let data = inputs.b.powi(2)
        * l.powi(3)
        * m
        * sigma.powf(2.0 * l)
        * r as f64
        * (l * m).ln()
        * prod;
    Ok(((data + tail) / (inputs.gamma.powi(2) * s)).sqrt())
}

/// Relative Frobenius-based bound term (constants set to 1):
/// √((B²·L²·m·σ^{2L−2}·log(L·m)·Σ‖Wᵢ‖_F² + log(L|S|/δ)) / (γ²|S|)).
pub fn cor2_bound(inputs: &BoundInputs) -> Result<f64> {
    let (l, s, tail) = bound_preamble(inputs)?;
    let sigma = inputs
        .weights
        .iter()
        .map(spectral_norm)
        .fold(0.0f64, |a, b| a.max(b));
    let frob_sum: f64 = inputs.weights.iter().map(|w| w.frobenius_norm().powi(2)).sum();
    let m = inputs.width as f64;
    let data =
        inputs.b.powi(2) * l.powi(2) * m * sigma.powf(2.0 * l - 2.0) * (l * m).ln() * frob_sum;
    Ok(((data + tail) / (inputs.gamma.powi(2) * s)).sqrt())
}

/// Fraction of samples whose true-class score fails to exceed every other
/// score by more than γ.
pub fn margin_loss(logits: &Tensor, labels: &[usize], gamma: f64) -> f64 {
    assert!(gamma >= 0.0);
    assert_eq!(logits.rows(), labels.len());
    let c = logits.cols();
    let mut fails = 0;
    for (i, &y) in labels.iter().enumerate() {
        let true_score = logits.at2(i, y);
        let best_other = (0..c)
            .filter(|&j| j != y)
            .map(|j| logits.at2(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        if true_score <= gamma + best_other {
            fails += 1;
        }
    }
    fails as f64 / labels.len() as f64
}
