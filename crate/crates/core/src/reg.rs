//! Decay schemes as explicit gradient contributions — factor-wise weight
//! decay, compression-rate-scaled decay, and Frobenius decay on the
//! recomposed product — plus the nuclear-norm bound diagnostic.

use serde::{Deserialize, Serialize};

use crate::factor::FactorizedParam;
use crate::layers::MhaHead;
use crate::svd::nuclear_norm;
use crate::tensor::Tensor;

/// Which penalty shapes the decay gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    #[default]
    None,
    /// Factor-wise weight decay: (λ/2)·Σ‖P‖_F² over individual factors.
    Wd,
    /// Factor-wise decay with λ scaled by the compression rate.
    Crs,
    /// Frobenius decay: (λ/2)·‖U(∏M)Vᵀ‖_F² on the recomposed matrix.
    Fd,
}

/// Which attention factor pairs receive Frobenius decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MhaTarget {
    #[default]
    OvOnly,
    OvAndQk,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayConfig {
    pub mode: DecayMode,
    pub lambda: f64,
    #[serde(default)]
    pub mha_target: MhaTarget,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig { mode: DecayMode::None, lambda: 0.0, mha_target: MhaTarget::OvOnly }
    }
}

impl DecayConfig {
    pub fn validate(&self) {
        assert!(self.lambda >= 0.0, "decay lambda must be nonnegative");
    }
}

/// (λ/2)·(‖U‖_F² + ‖V‖_F² + Σ‖Mⱼ‖_F²).
pub fn wd_penalty(fp: &FactorizedParam, lambda: f64) -> f64 {
    let mut s = fp.u.frobenius_norm().powi(2) + fp.v.frobenius_norm().powi(2);
    for mj in &fp.inner {
        s += mj.frobenius_norm().powi(2);
    }
    0.5 * lambda * s
}

/// Adds λ·P to each factor's gradient buffer.
pub fn wd_gradients(fp: &mut FactorizedParam, lambda: f64) {
    assert!(lambda >= 0.0);
    if lambda == 0.0 {
        return;
    }
    fp.u_grad.add_scaled(&fp.u, lambda);
    fp.v_grad.add_scaled(&fp.v, lambda);
    for (g, mj) in fp.inner_grad.iter_mut().zip(&fp.inner) {
        g.add_scaled(mj, lambda);
    }
}

/// (λ/2)·‖U(∏M)Vᵀ‖_F².
pub fn fd_penalty(fp: &FactorizedParam, lambda: f64) -> f64 {
    0.5 * lambda * fp.recompose().frobenius_norm().powi(2)
}

/// Adds the Frobenius-decay gradients to each factor's buffer: with
/// P = ∏Mⱼ and W = U·P·Vᵀ, ∇U = λ·W·V·Pᵀ, ∇V = λ·Wᵀ·U·P, and
/// ∇Mⱼ = λ·Aⱼᵀ·W·Bⱼᵀ for the partial products around Mⱼ. For d = 0 these
/// reduce to λ·U·(VᵀV) and λ·V·(UᵀU).
pub fn fd_gradients(fp: &mut FactorizedParam, lambda: f64) {
    assert!(lambda >= 0.0);
    if lambda == 0.0 {
        return;
    }
    let w = fp.recompose().scale(lambda);
    fp.accumulate_from_composed(&w);
}

/// Frobenius-decay gradient of a d = 0 pair, returned rather than
/// accumulated: (λ·U·VᵀV, λ·V·UᵀU). Used where the optimizer applies decay
/// decoupled from the data gradients.
pub fn fd_pair_gradients(u: &Tensor, v: &Tensor, lambda: f64) -> (Tensor, Tensor) {
    let vtv = v.matmul_tn(v);
    let utu = u.matmul_tn(u);
    (u.matmul(&vtv).scale(lambda), v.matmul(&utu).scale(lambda))
}

/// Eq.-2-style diagnostic for a d = 0 factorization: returns
/// (lhs, rhs, gap) with lhs = (1/2)(‖U‖_F² + ‖V‖_F²), rhs = ‖U·Vᵀ‖_*.
pub fn nuclear_bound_gap(fp: &FactorizedParam) -> (f64, f64, f64) {
    assert_eq!(fp.depth(), 0, "nuclear bound diagnostic requires d = 0");
    let lhs = 0.5 * (fp.u.frobenius_norm().powi(2) + fp.v.frobenius_norm().powi(2));
    let rhs = nuclear_norm(&fp.recompose());
    (lhs, rhs, lhs - rhs)
}

/// Applies Frobenius decay to each head's OV pair and, when configured, its
/// QK pair as well.
pub fn mha_decay(heads: &mut [MhaHead], cfg: &DecayConfig) {
    assert_eq!(cfg.mode, DecayMode::Fd, "attention decay uses Frobenius decay");
    for head in heads.iter_mut() {
        fd_gradients(&mut head.ov, cfg.lambda);
        if cfg.mha_target == MhaTarget::OvAndQk {
            fd_gradients(&mut head.qk, cfg.lambda);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::FactorMode;
    use crate::factor::spectral_init;
    use crate::rng::{gaussian_from, random_gaussian, Xoshiro256};

    fn random_pair(m: usize, n: usize, r: usize, rng: &mut Xoshiro256) -> FactorizedParam {
        FactorizedParam::new(
            "w",
            gaussian_from(vec![m, r], 1.0, rng),
            vec![],
            gaussian_from(vec![n, r], 1.0, rng),
            FactorMode::LowRank,
            (m, n),
        )
    }

    #[test]
    fn zero_lambda_is_noop() {
        let mut rng = Xoshiro256::seed_from_u64(1);
        let mut fp = random_pair(4, 3, 2, &mut rng);
        wd_gradients(&mut fp, 0.0);
        fd_gradients(&mut fp, 0.0);
        assert_eq!(fp.u_grad.max_abs(), 0.0);
        assert_eq!(fp.v_grad.max_abs(), 0.0);
    }

    #[test]
    fn wd_penalty_matches_sum_of_squares() {
        let mut rng = Xoshiro256::seed_from_u64(2);
        let u = gaussian_from(vec![5, 5], 1.0, &mut rng);
        let m1 = gaussian_from(vec![5, 5], 1.0, &mut rng);
        let v = gaussian_from(vec![3, 5], 1.0, &mut rng);
        let fp = FactorizedParam::new("w", u.clone(), vec![m1.clone()], v.clone(), FactorMode::Deep, (5, 3));
        let direct: f64 = u.data().iter().chain(m1.data()).chain(v.data()).map(|x| x * x).sum();
        let lambda = 0.37;
        assert!((wd_penalty(&fp, lambda) - 0.5 * lambda * direct).abs() < 1e-12);
    }

    #[test]
    fn wd_gradients_vs_finite_diff() {
        let mut rng = Xoshiro256::seed_from_u64(3);
        let mut fp = random_pair(4, 3, 2, &mut rng);
        let lambda = 0.2;
        wd_gradients(&mut fp, lambda);
        let eps = 1e-6;
        for i in 0..fp.u.len() {
            let mut plus = fp.clone();
            plus.u.data_mut()[i] += eps;
            let mut minus = fp.clone();
            minus.u.data_mut()[i] -= eps;
            let fd = (wd_penalty(&plus, lambda) - wd_penalty(&minus, lambda)) / (2.0 * eps);
            let an = fp.u_grad.data()[i];
            assert!((fd - an).abs() <= 1e-7 * an.abs().max(1e-8), "fd {fd} vs {an}");
        }
    }

    #[test]
    fn fd_orthonormal_v_equals_wd_on_u() {
        // V = I₂ → ∇U = λ·U·(VᵀV) = λ·U
        let lambda = 0.7;
        let mut fp = FactorizedParam::new(
            "w",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, -2.0]),
            vec![],
            Tensor::eye(2),
            FactorMode::Full,
            (2, 2),
        );
        fd_gradients(&mut fp, lambda);
        let expect = fp.u.scale(lambda);
        assert!(fp.u_grad.sub(&expect).max_abs() < 1e-14);

        // random orthonormal V via SI of a square matrix restricted to rank r
        let mut rng = Xoshiro256::seed_from_u64(4);
        let q = crate::svd::svd_full(&gaussian_from(vec![4, 4], 1.0, &mut rng))
            .unwrap()
            .left;
        let mut v = Tensor::zeros(vec![4, 2]);
        for i in 0..4 {
            for j in 0..2 {
                v.set2(i, j, q.at2(i, j));
            }
        }
        let u = gaussian_from(vec![3, 2], 1.0, &mut rng);
        let mut fp = FactorizedParam::new("w", u.clone(), vec![], v, FactorMode::LowRank, (3, 4));
        fd_gradients(&mut fp, lambda);
        let mut wd = fp.clone();
        wd.zero_grad();
        wd_gradients(&mut wd, lambda);
        assert!(fp.u_grad.sub(&wd.u_grad).max_abs() < 1e-12);
    }

    #[test]
    fn fd_identity_inner_reduces_to_flat() {
        let mut rng = Xoshiro256::seed_from_u64(5);
        let u = gaussian_from(vec![4, 4], 1.0, &mut rng);
        let v = gaussian_from(vec![3, 4], 1.0, &mut rng);
        let lambda = 0.3;
        let mut deep = FactorizedParam::new(
            "w",
            u.clone(),
            vec![Tensor::eye(4)],
            v.clone(),
            FactorMode::Deep,
            (4, 3),
        );
        fd_gradients(&mut deep, lambda);
        let mut flat = FactorizedParam::new("w", u.clone(), vec![], v.clone(), FactorMode::Full, (4, 3));
        fd_gradients(&mut flat, lambda);
        assert!(deep.u_grad.sub(&flat.u_grad).max_abs() < 1e-12);
        assert!(deep.v_grad.sub(&flat.v_grad).max_abs() < 1e-12);
        // ∇M at M = I is λ·Uᵀ·W·V with W = U·Vᵀ
        let w = u.matmul_nt(&v);
        let expect = u.matmul_tn(&w).matmul(&v).scale(lambda);
        assert!(deep.inner_grad[0].sub(&expect).max_abs() < 1e-10);
    }

    #[test]
    fn fd_gradients_vs_finite_diff_depth2() {
        let mut rng = Xoshiro256::seed_from_u64(6);
        let lambda = 0.11;
        let fp0 = FactorizedParam::new(
            "w",
            gaussian_from(vec![5, 5], 1.0, &mut rng),
            vec![
                gaussian_from(vec![5, 5], 0.5, &mut rng),
                gaussian_from(vec![5, 5], 0.5, &mut rng),
            ],
            gaussian_from(vec![3, 5], 1.0, &mut rng),
            FactorMode::Deep,
            (5, 3),
        );
        let mut fp = fp0.clone();
        fd_gradients(&mut fp, lambda);
        let eps = 1e-5;
        let check = |analytic: &Tensor, mutate: &mut dyn FnMut(&mut FactorizedParam, usize, f64)| {
            for i in 0..analytic.len() {
                let mut plus = fp0.clone();
                mutate(&mut plus, i, eps);
                let mut minus = fp0.clone();
                mutate(&mut minus, i, -eps);
                let fd = (fd_penalty(&plus, lambda) - fd_penalty(&minus, lambda)) / (2.0 * eps);
                let an = analytic.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-6),
                    "fd {fd} vs analytic {an}"
                );
            }
        };
        check(&fp.u_grad.clone(), &mut |p, i, e| p.u.data_mut()[i] += e);
        check(&fp.v_grad.clone(), &mut |p, i, e| p.v.data_mut()[i] += e);
        for j in 0..2 {
            check(&fp.inner_grad[j].clone(), &mut |p, i, e| p.inner[j].data_mut()[i] += e);
        }
    }

    #[test]
    fn fd_is_lambda_homogeneous() {
        let mut rng = Xoshiro256::seed_from_u64(7);
        let base = random_pair(5, 4, 3, &mut rng);
        let mut single = base.clone();
        fd_gradients(&mut single, 0.25);
        let mut double = base.clone();
        fd_gradients(&mut double, 0.5);
        assert!(double.u_grad.sub(&single.u_grad.scale(2.0)).max_abs() < 1e-14);
        assert!(double.v_grad.sub(&single.v_grad.scale(2.0)).max_abs() < 1e-14);
    }

    #[test]
    fn nuclear_gap_nonnegative_and_tight_at_si() {
        let mut rng = Xoshiro256::seed_from_u64(8);
        for _ in 0..200 {
            let fp = random_pair(6, 4, 3, &mut rng);
            let (lhs, rhs, gap) = nuclear_bound_gap(&fp);
            assert!(gap >= -1e-9, "gap {gap} (lhs {lhs}, rhs {rhs})");
        }
        for seed in 0..10 {
            let w = random_gaussian(vec![7, 5], 1.0, seed).unwrap();
            let fp = spectral_init("w", &w, 3).unwrap();
            let (_, _, gap) = nuclear_bound_gap(&fp);
            assert!(gap.abs() <= 1e-8, "SI gap {gap}");
        }
    }

    #[test]
    fn imbalanced_factors_widen_gap() {
        let w = random_gaussian(vec![5, 4], 1.0, 42).unwrap();
        let fp = spectral_init("w", &w, 3).unwrap();
        let mut skew = fp.clone();
        skew.u.scale_in_place(10.0);
        skew.v.scale_in_place(0.1);
        let (_, rhs0, gap0) = nuclear_bound_gap(&fp);
        let (_, rhs1, gap1) = nuclear_bound_gap(&skew);
        assert!((rhs0 - rhs1).abs() < 1e-8, "product unchanged");
        assert!(gap1 > gap0 + 1.0, "imbalance should widen the gap");
    }

    #[test]
    fn mha_decay_ov_only_leaves_qk() {
        let mut rng = Xoshiro256::seed_from_u64(9);
        let (d, r) = (6, 3);
        let mk = |rng: &mut Xoshiro256| {
            FactorizedParam::new(
                "p",
                gaussian_from(vec![d, r], 1.0, rng),
                vec![],
                gaussian_from(vec![d, r], 1.0, rng),
                FactorMode::LowRank,
                (d, d),
            )
        };
        let mut heads = vec![MhaHead { qk: mk(&mut rng), ov: mk(&mut rng) }];
        let cfg = DecayConfig { mode: DecayMode::Fd, lambda: 0.5, mha_target: MhaTarget::OvOnly };
        mha_decay(&mut heads, &cfg);
        assert_eq!(heads[0].qk.u_grad.max_abs(), 0.0);
        assert!(heads[0].ov.u_grad.max_abs() > 0.0);
        // λ = 0 is a no-op even on OV
        let mut heads2 = vec![MhaHead { qk: mk(&mut rng), ov: mk(&mut rng) }];
        let cfg0 = DecayConfig { mode: DecayMode::Fd, lambda: 0.0, mha_target: MhaTarget::OvAndQk };
        mha_decay(&mut heads2, &cfg0);
        assert_eq!(heads2[0].ov.u_grad.max_abs(), 0.0);
    }

    #[test]
    fn mha_decay_vs_finite_diff() {
        let mut rng = Xoshiro256::seed_from_u64(10);
        let (d, r) = (5, 2);
        let mk = |rng: &mut Xoshiro256| {
            FactorizedParam::new(
                "p",
                gaussian_from(vec![d, r], 1.0, rng),
                vec![],
                gaussian_from(vec![d, r], 1.0, rng),
                FactorMode::LowRank,
                (d, d),
            )
        };
        let head0 = MhaHead { qk: mk(&mut rng), ov: mk(&mut rng) };
        let lambda = 0.3;
        let cfg = DecayConfig { mode: DecayMode::Fd, lambda, mha_target: MhaTarget::OvAndQk };
        let mut heads = vec![head0.clone()];
        mha_decay(&mut heads, &cfg);
        let penalty = |h: &MhaHead| fd_penalty(&h.ov, lambda) + fd_penalty(&h.qk, lambda);
        let eps = 1e-5;
        let analytic = heads[0].ov.u_grad.clone();
        for i in 0..analytic.len() {
            let mut plus = head0.clone();
            plus.ov.u.data_mut()[i] += eps;
            let mut minus = head0.clone();
            minus.ov.u.data_mut()[i] -= eps;
            let fd = (penalty(&plus) - penalty(&minus)) / (2.0 * eps);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-6), "fd {fd} vs {an}");
        }
    }

    #[test]
    fn fd_pair_matches_accumulated_form() {
        let mut rng = Xoshiro256::seed_from_u64(11);
        let mut fp = random_pair(6, 4, 3, &mut rng);
        let lambda = 0.42;
        let (du, dv) = fd_pair_gradients(&fp.u, &fp.v, lambda);
        fd_gradients(&mut fp, lambda);
        assert!(fp.u_grad.sub(&du).max_abs() < 1e-12);
        assert!(fp.v_grad.sub(&dv).max_abs() < 1e-12);
    }
}
