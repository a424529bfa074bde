//! Factorized parameters W = U·(∏Mⱼ)·Vᵀ: spectral and default
//! initialization, rank assignment, recomposition, and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::rng::{gaussian_from, Xoshiro256};
use crate::svd::svd;
use crate::tensor::{Result, Tensor};

/// How a factorization relates to its m×n target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMode {
    /// r ≤ min(m, n), no inner matrices.
    LowRank,
    /// r = m, no inner matrices (overcomplete "full").
    Full,
    /// r = m, one or more inner m×m matrices (overcomplete "deep", default
    /// depth 1).
    Deep,
    /// r = 3m, no inner matrices (overcomplete "wide").
    Wide,
}

/// A factorized m×n parameter with per-factor gradient buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizedParam {
    pub name: String,
    pub u: Tensor,            // m×r
    pub inner: Vec<Tensor>,   // d matrices, each r×r
    pub v: Tensor,            // n×r
    pub mode: FactorMode,
    pub target_shape: (usize, usize),
    pub u_grad: Tensor,
    pub inner_grad: Vec<Tensor>,
    pub v_grad: Tensor,
}

impl FactorizedParam {
    pub fn new(
        name: impl Into<String>,
        u: Tensor,
        inner: Vec<Tensor>,
        v: Tensor,
        mode: FactorMode,
        target_shape: (usize, usize),
    ) -> Self {
        let (m, n) = target_shape;
        let r = u.cols();
        assert_eq!(u.rows(), m, "U rows must match target m");
        assert_eq!(v.rows(), n, "V rows must match target n");
        assert_eq!(v.cols(), r, "U and V must share rank");
        for mj in &inner {
            assert_eq!(mj.shape(), &[r, r], "inner matrices must be r×r");
        }
        match mode {
            FactorMode::LowRank => assert!(r <= m.min(n), "lowrank requires r ≤ min(m,n)"),
            FactorMode::Full => assert!(r == m && inner.is_empty(), "full requires r = m, d = 0"),
            FactorMode::Deep => assert!(r == m && !inner.is_empty(), "deep requires r = m, d ≥ 1"),
            FactorMode::Wide => assert!(r == 3 * m && inner.is_empty(), "wide requires r = 3m, d = 0"),
        }
        let u_grad = Tensor::zeros_like(&u);
        let v_grad = Tensor::zeros_like(&v);
        let inner_grad = inner.iter().map(Tensor::zeros_like).collect();
        FactorizedParam {
            name: name.into(),
            u,
            inner,
            v,
            mode,
            target_shape,
            u_grad,
            inner_grad,
            v_grad,
        }
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn depth(&self) -> usize {
        self.inner.len()
    }

    /// ∏Mⱼ, left-to-right; identity when d = 0.
    pub fn inner_product(&self) -> Tensor {
        let r = self.rank();
        let mut p = Tensor::eye(r);
        for mj in &self.inner {
            p = p.matmul(mj);
        }
        p
    }

    /// U·(∏Mⱼ)·Vᵀ.
    pub fn recompose(&self) -> Tensor {
        let mut w = self.u.clone();
        for mj in &self.inner {
            w = w.matmul(mj);
        }
        w.matmul_nt(&self.v)
    }

    /// Trainable value count across all factors.
    pub fn train_param_count(&self) -> usize {
        self.u.len() + self.v.len() + self.inner.iter().map(Tensor::len).sum::<usize>()
    }

    /// Chain rule from a gradient w.r.t. the composed W into per-factor
    /// gradient buffers: ∇U = ∇W·V·Pᵀ, ∇V = ∇Wᵀ·U·P,
    /// ∇Mⱼ = Aⱼᵀ·∇W·Bⱼᵀ for the partial products around Mⱼ.
    pub fn accumulate_from_composed(&mut self, dw: &Tensor) {
        assert_eq!(
            dw.shape(),
            &[self.target_shape.0, self.target_shape.1],
            "composed gradient shape mismatch"
        );
        let p = self.inner_product();
        // ∇U = ∇W · (P Vᵀ)ᵀ = ∇W · V · Pᵀ
        let dwv = dw.matmul(&self.v);
        self.u_grad.add_scaled(&dwv.matmul_nt(&p), 1.0);
        // ∇V = ∇Wᵀ · U · P
        let up = self.u.matmul(&p);
        self.v_grad.add_scaled(&dw.matmul_tn(&up), 1.0);
        // inner matrices
        let d = self.inner.len();
        for j in 0..d {
            // A = U·M₁…Mⱼ₋₁, B = Mⱼ₊₁…M_d·Vᵀ
            let mut a = self.u.clone();
            for mk in &self.inner[..j] {
                a = a.matmul(mk);
            }
            let mut b = Tensor::eye(self.rank());
            for mk in &self.inner[j + 1..] {
                b = b.matmul(mk);
            }
            let b = b.matmul_nt(&self.v); // r×n
            let g = a.matmul_tn(dw).matmul_nt(&b);
            self.inner_grad[j].add_scaled(&g, 1.0);
        }
    }

    pub fn zero_grad(&mut self) {
        self.u_grad.fill(0.0);
        self.v_grad.fill(0.0);
        for g in &mut self.inner_grad {
            g.fill(0.0);
        }
    }

    /// Multiply U and V by s (used by the norm-matching controller; scales
    /// the recomposed matrix by s²).
    pub fn scale_outer_factors(&mut self, s: f64) {
        self.u.scale_in_place(s);
        self.v.scale_in_place(s);
    }
}

/// Spectral initialization: U = Ũ√Σ, V = Ṽ√Σ from the rank-r SVD of W.
pub fn spectral_init(name: impl Into<String>, w: &Tensor, r: usize) -> Result<FactorizedParam> {
    let (m, n) = (w.rows(), w.cols());
    let res = svd(w, r)?;
    let mut u = res.left.clone();
    let mut v = res.right.clone();
    for k in 0..r {
        let s = res.singular_values[k].sqrt();
        for i in 0..m {
            let val = u.at2(i, k) * s;
            u.set2(i, k, val);
        }
        for j in 0..n {
            let val = v.at2(j, k) * s;
            v.set2(j, k, val);
        }
    }
    Ok(FactorizedParam::new(name, u, vec![], v, FactorMode::LowRank, (m, n)))
}

/// Default (non-spectral) factor initialization: U, V i.i.d. Gaussian with
/// fan-in scaling std = √(2/fan_in), inner matrices set to the identity.
pub fn default_factor_init(
    name: impl Into<String>,
    m: usize,
    n: usize,
    r: usize,
    d: usize,
    mode: FactorMode,
    rng: &mut Xoshiro256,
) -> FactorizedParam {
    assert!(r >= 1);
    let std_u = (2.0 / r as f64).sqrt();
    let std_v = (2.0 / n as f64).sqrt();
    let u = gaussian_from(vec![m, r], std_u, rng);
    let v = gaussian_from(vec![n, r], std_v, rng);
    let inner = (0..d).map(|_| Tensor::eye(r)).collect();
    FactorizedParam::new(name, u, inner, v, mode, (m, n))
}

/// Uniform rank rule: r = clamp(round(scale·c_out·k), 1, min(c_out·k, c_in·k)),
/// rounding half-down.
pub fn rank_from_scale(scale: f64, c_out: usize, k: usize, c_in: usize) -> usize {
    assert!(scale > 0.0, "scale must be positive");
    let raw = scale * (c_out * k) as f64;
    let rounded = (raw - 0.5).ceil().max(1.0) as usize;
    rounded.min((c_out * k).min(c_in * k)).max(1)
}

/// Trainable-vs-original parameter accounting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompressionReport {
    pub original_params: usize,
    pub factorized_params: usize,
    pub rate: f64,
}

impl CompressionReport {
    pub fn new(original_params: usize, factorized_params: usize) -> Self {
        assert!(original_params > 0);
        CompressionReport {
            original_params,
            factorized_params,
            rate: factorized_params as f64 / original_params as f64,
        }
    }
}

/// Scale for the preset `crs` decay mode (weight decay times compression
/// rate).
pub fn crs_lambda(lambda: f64, report: &CompressionReport) -> f64 {
    lambda * report.rate
}
