//! Layer forward/backward definitions: fully-connected, 2d convolution, the
//! two-1d-convolution factorized form, batch normalization, multi-head
//! attention, softmax cross-entropy, and a finite-difference gradient
//! checker.

use crate::factor::FactorizedParam;
use crate::tensor::{Error, Result, Tensor};

/// A dense trainable tensor with its gradient buffer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// fully-connected

/// y = x·Wᵀ for W m×n, x B×n.
pub fn fc_forward(w: &Tensor, x: &Tensor) -> Tensor {
    x.matmul_nt(w)
}

/// Returns (∇W, ∇x) for upstream gradient dy (B×m).
pub fn fc_backward(w: &Tensor, x: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let dw = dy.matmul_tn(x);
    let dx = dy.matmul(w);
    (dw, dx)
}

// ---------------------------------------------------------------------------
// 2d convolution (cross-correlation), zero padding (k-1)/2, stride 1 or 2

#[inline]
fn conv_out_dim(h: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (h + 2 * pad - k) / stride + 1
}

/// kernel [c_out, c_in, k, k], x [B, c_in, h, w] → [B, c_out, h', w'].
pub fn conv2d_forward(kernel: &Tensor, x: &Tensor, stride: usize) -> Result<Tensor> {
    let ks = kernel.shape();
    let xs = x.shape();
    assert_eq!(ks.len(), 4, "kernel must be 4-d, got {ks:?}");
    assert_eq!(xs.len(), 4, "input must be 4-d, got {xs:?}");
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    if ks[2] != ks[3] {
        return Err(Error::InvalidArg(format!("kernel must be square, got {ks:?}")));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidArg(format!("kernel size must be odd, got {k}")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArg(format!("stride must be 1 or 2, got {stride}")));
    }
    assert_eq!(xs[1], c_in, "input channels {} vs kernel {}", xs[1], c_in);
    let (b, h, w) = (xs[0], xs[2], xs[3]);
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_out_dim(h, k, stride), conv_out_dim(w, k, stride));
    let mut out = Tensor::zeros(vec![b, c_out, ho, wo]);
    let kd = kernel.data();
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky).wrapping_sub(pad);
                            if iy >= h {
                                continue;
                            }
                            let xrow = ((bi * c_in + ci) * h + iy) * w;
                            let krow = ((co * c_in + ci) * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx).wrapping_sub(pad);
                                if ix >= w {
                                    continue;
                                }
                                acc += kd[krow + kx] * xd[xrow + ix];
                            }
                        }
                    }
                    od[((bi * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Returns (∇kernel, ∇x).
pub fn conv2d_backward(kernel: &Tensor, x: &Tensor, dy: &Tensor, stride: usize) -> (Tensor, Tensor) {
    let ks = kernel.shape();
    let xs = x.shape();
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    let (b, h, w) = (xs[0], xs[2], xs[3]);
    let pad = (k - 1) / 2;
    let (ho, wo) = (conv_out_dim(h, k, stride), conv_out_dim(w, k, stride));
    assert_eq!(dy.shape(), &[b, c_out, ho, wo], "upstream gradient shape");
    let mut dk = Tensor::zeros_like(kernel);
    let mut dx = Tensor::zeros_like(x);
    let kd = kernel.data();
    let xd = x.data();
    let gd = dy.data();
    let dkd = dk.data_mut();
    let dxd = dx.data_mut();
    for bi in 0..b {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[((bi * c_out + co) * ho + oy) * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky).wrapping_sub(pad);
                            if iy >= h {
                                continue;
                            }
                            let xrow = ((bi * c_in + ci) * h + iy) * w;
                            let krow = ((co * c_in + ci) * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx).wrapping_sub(pad);
                                if ix >= w {
                                    continue;
                                }
                                dkd[krow + kx] += g * xd[xrow + ix];
                                dxd[xrow + ix] += g * kd[krow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dk, dx)
}

/// Reshape a (c_out·k)×(c_in·k) matrix into a conv kernel. Row index carries
/// (output channel, vertical offset), column index (input channel, horizontal
/// offset) — the layout under which U·Vᵀ is the two-1d-convolution kernel.
pub fn matrix_to_kernel(m: &Tensor, c_out: usize, c_in: usize, k: usize) -> Tensor {
    assert_eq!(m.shape(), &[c_out * k, c_in * k], "kernel matrix shape");
    let mut kernel = Tensor::zeros(vec![c_out, c_in, k, k]);
    let kd = kernel.data_mut();
    for co in 0..c_out {
        for kh in 0..k {
            for ci in 0..c_in {
                for kw in 0..k {
                    kd[((co * c_in + ci) * k + kh) * k + kw] = m.at2(co * k + kh, ci * k + kw);
                }
            }
        }
    }
    kernel
}

/// Inverse of [`matrix_to_kernel`].
pub fn kernel_to_matrix(kernel: &Tensor) -> Tensor {
    let ks = kernel.shape();
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    let mut m = Tensor::zeros(vec![c_out * k, c_in * k]);
    let kd = kernel.data();
    for co in 0..c_out {
        for kh in 0..k {
            for ci in 0..c_in {
                for kw in 0..k {
                    m.set2(co * k + kh, ci * k + kw, kd[((co * c_in + ci) * k + kh) * k + kw]);
                }
            }
        }
    }
    m
}

/// Factorized convolution as two 1d convolutions (stride 1): first Vᵀ along
/// the horizontal axis producing r channels, then U along the vertical axis
/// producing c_out channels. Equals `conv2d_forward(matrix_to_kernel(U·Vᵀ))`.
pub fn factorized_conv_forward(
    u: &Tensor,
    v: &Tensor,
    x: &Tensor,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Tensor {
    assert_eq!(u.shape(), &[c_out * k, u.cols()], "U shape");
    assert_eq!(v.shape(), &[c_in * k, u.cols()], "V shape");
    let r = u.cols();
    let xs = x.shape();
    assert_eq!(xs[1], c_in, "input channels");
    let (b, h, w) = (xs[0], xs[2], xs[3]);
    let pad = (k - 1) / 2;
    let xd = x.data();

    // horizontal pass: z[b, j, y, x] = Σ_{ci,kw} V[ci·k+kw, j] · x[b, ci, y, x+kw−pad]
    let mut z = Tensor::zeros(vec![b, r, h, w]);
    {
        let zd = z.data_mut();
        for bi in 0..b {
            for j in 0..r {
                for ci in 0..c_in {
                    for kw in 0..k {
                        let coeff = v.at2(ci * k + kw, j);
                        if coeff == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let xrow = ((bi * c_in + ci) * h + y) * w;
                            let zrow = ((bi * r + j) * h + y) * w;
                            for xc in 0..w {
                                let ix = (xc + kw).wrapping_sub(pad);
                                if ix >= w {
                                    continue;
                                }
                                zd[zrow + xc] += coeff * xd[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }

    // vertical pass: y[b, co, y, x] = Σ_{j,kh} U[co·k+kh, j] · z[b, j, y+kh−pad, x]
    let mut out = Tensor::zeros(vec![b, c_out, h, w]);
    let zd = z.data();
    let od = out.data_mut();
    for bi in 0..b {
        for co in 0..c_out {
            for j in 0..r {
                for kh in 0..k {
                    let coeff = u.at2(co * k + kh, j);
                    if coeff == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let iy = (y + kh).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        let zrow = ((bi * r + j) * h + iy) * w;
                        let orow = ((bi * c_out + co) * h + y) * w;
                        for xc in 0..w {
                            od[orow + xc] += coeff * zd[zrow + xc];
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// batch normalization

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    count: usize,
}

/// Per-channel standardization over batch (and spatial) positions with a
/// learnable affine. Training uses batch statistics; eval uses running
/// averages with momentum 0.1.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    #[serde(skip)]
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::new(vec![channels], vec![1.0; channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// (channel of flat index, positions per channel) for [B,C] or [B,C,H,W].
    fn layout(&self, shape: &[usize]) -> (usize, usize) {
        match shape.len() {
            2 => {
                assert_eq!(shape[1], self.channels());
                (shape[0], 1)
            }
            4 => {
                assert_eq!(shape[1], self.channels());
                (shape[0], shape[2] * shape[3])
            }
            _ => panic!("batchnorm expects 2-d or 4-d input, got {shape:?}"),
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let c = self.channels();
        let (b, spatial) = self.layout(x.shape());
        let count = b * spatial;
        assert!(
            !train || count > 1,
            "batchnorm training mode requires more than one position per channel"
        );
        let xd = x.data();
        let per_channel = |f: &mut dyn FnMut(usize, f64)| {
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    for s in 0..spatial {
                        f(ci, xd[base + s]);
                    }
                }
            }
        };
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            per_channel(&mut |ci, v| mean[ci] += v);
            for m in &mut mean {
                *m /= count as f64;
            }
            let mut var = vec![0.0; c];
            per_channel(&mut |ci, v| var[ci] += (v - mean[ci]) * (v - mean[ci]));
            for v in &mut var {
                *v /= count as f64;
            }
            for ci in 0..c {
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci];
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros_like(x);
        let mut out = Tensor::zeros_like(x);
        {
            let xh = xhat.data_mut();
            let od = out.data_mut();
            let g = self.gamma.value.data();
            let bt = self.beta.value.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    for s in 0..spatial {
                        let h = (xd[base + s] - mean[ci]) * inv_std[ci];
                        xh[base + s] = h;
                        od[base + s] = g[ci] * h + bt[ci];
                    }
                }
            }
        }
        if train {
            self.cache = Some(BnCache { xhat, inv_std, count });
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("backward without forward");
        let c = self.channels();
        let (b, spatial) = self.layout(dy.shape());
        let n = cache.count as f64;
        let gd = dy.data();
        let xh = cache.xhat.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    dgamma[ci] += gd[base + s] * xh[base + s];
                    dbeta[ci] += gd[base + s];
                }
            }
        }
        let mut dx = Tensor::zeros_like(dy);
        {
            let dxd = dx.data_mut();
            let g = self.gamma.value.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    let k = g[ci] * cache.inv_std[ci];
                    for s in 0..spatial {
                        dxd[base + s] = k
                            * (gd[base + s]
                                - dbeta[ci] / n
                                - xh[base + s] * dgamma[ci] / n);
                    }
                }
            }
        }
        for (gp, v) in self.gamma.grad.data_mut().iter_mut().zip(&dgamma) {
            *gp += v;
        }
        for (bp, v) in self.beta.grad.data_mut().iter_mut().zip(&dbeta) {
            *bp += v;
        }
        dx
    }
}

/// Normalized fully-connected layer: batch-standardized W·x with affine.
/// Invariant to positive rescaling of W up to the stabilizing epsilon.
pub fn norm_layer_forward(w: &Tensor, x: &Tensor, affine: Option<(&Tensor, &Tensor)>) -> Tensor {
    let pre = fc_forward(w, x);
    let mut bn = BatchNorm::new("tmp", w.rows());
    if let Some((gamma, beta)) = affine {
        bn.gamma.value = gamma.clone();
        bn.beta.value = beta.clone();
    }
    bn.forward(&pre, true)
}

// ---------------------------------------------------------------------------
// relu / pooling

pub fn relu_forward(x: &Tensor) -> (Tensor, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    (Tensor::new(x.shape().to_vec(), data), mask)
}

pub fn relu_backward(dy: &Tensor, mask: &[bool]) -> Tensor {
    let data = dy
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Tensor::new(dy.shape().to_vec(), data)
}

/// 2×2 average pooling with stride 2 on [B,C,H,W]; H and W must be even.
pub fn avgpool2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 requires even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![b, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((bi * c + ci) * h + 2 * oy) * w + 2 * ox;
                    let sum = xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
                    od[((bi * c + ci) * ho + oy) * wo + ox] = 0.25 * sum;
                }
            }
        }
    }
    out
}

pub fn avgpool2_backward(dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let gd = dy.data();
    let dxd = dx.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = 0.25 * gd[((bi * c + ci) * ho + oy) * wo + ox];
                    let base = ((bi * c + ci) * h + 2 * oy) * w + 2 * ox;
                    dxd[base] += g;
                    dxd[base + 1] += g;
                    dxd[base + w] += g;
                    dxd[base + w + 1] += g;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// multi-head attention

/// One attention head: the Query-Key and Output-Value quadratic forms, each a
/// d×d matrix factorized as a rank-r product.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MhaHead {
    /// Q·Kᵀ with Q = u, K = v (both d×r).
    pub qk: FactorizedParam,
    /// V·Oᵀ with V = u, O = v (both d×r).
    pub ov: FactorizedParam,
}

/// Multi-head self-attention over a T×d sequence:
/// Σ_h Softmax(x·Qₕ·Kₕᵀ·xᵀ/√r)·x·Vₕ·Oₕᵀ. The softmax scaling uses the
/// actual factor rank r, which reduces to √(d/H) at the default rank.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MhaLayer {
    pub heads: Vec<MhaHead>,
    pub d_model: usize,
    pub r_attn: usize,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    /// Per head: (attention matrix A, value path Z = x·VOᵀ).
    per_head: Vec<(Tensor, Tensor)>,
}

impl MhaLayer {
    pub fn new(heads: Vec<MhaHead>, d_model: usize, r_attn: usize) -> Result<Self> {
        if r_attn < 1 {
            return Err(Error::InvalidArg("r_attn must be ≥ 1".into()));
        }
        for h in &heads {
            assert_eq!(h.qk.target_shape, (d_model, d_model));
            assert_eq!(h.ov.target_shape, (d_model, d_model));
            assert_eq!(h.qk.rank(), r_attn);
            assert_eq!(h.ov.rank(), r_attn);
        }
        Ok(MhaLayer { heads, d_model, r_attn })
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, MhaCache) {
        let t = x.rows();
        assert_eq!(x.cols(), self.d_model, "input width vs d_model");
        let scale = 1.0 / (self.r_attn as f64).sqrt();
        let mut out = Tensor::zeros(vec![t, self.d_model]);
        let mut per_head = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w_qk = head.qk.recompose();
            let w_ov = head.ov.recompose();
            let logits = x.matmul(&w_qk).matmul_nt(x).scale(scale);
            let a = softmax_rows(&logits);
            let z = x.matmul(&w_ov);
            out.add_scaled(&a.matmul(&z), 1.0);
            per_head.push((a, z));
        }
        (out, MhaCache { per_head })
    }

    /// Accumulates factor gradients for every head and returns ∇x.
    pub fn backward(&mut self, x: &Tensor, cache: &MhaCache, dout: &Tensor) -> Tensor {
        let scale = 1.0 / (self.r_attn as f64).sqrt();
        let mut dx = Tensor::zeros_like(x);
        for (head, (a, z)) in self.heads.iter_mut().zip(&cache.per_head) {
            let w_qk = head.qk.recompose();
            let w_ov = head.ov.recompose();
            let da = dout.matmul_nt(z);
            let dz = a.matmul_tn(dout);
            // value path
            head.ov.accumulate_from_composed(&x.matmul_tn(&dz));
            dx.add_scaled(&dz.matmul_nt(&w_ov), 1.0);
            // softmax backward, rows independent
            let ds = softmax_backward_rows(a, &da).scale(scale);
            head.qk.accumulate_from_composed(&x.matmul_tn(&ds).matmul(x));
            dx.add_scaled(&ds.matmul(x).matmul_nt(&w_qk), 1.0);
            dx.add_scaled(&ds.matmul_tn(x).matmul(&w_qk), 1.0);
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        for h in &mut self.heads {
            h.qk.zero_grad();
            h.ov.zero_grad();
        }
    }
}

/// Row-wise stabilized softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, n) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros_like(logits);
    for i in 0..m {
        let row = &logits.data()[i * n..(i + 1) * n];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        let mut exps = vec![0.0; n];
        for j in 0..n {
            exps[j] = (row[j] - max).exp();
            sum += exps[j];
        }
        for j in 0..n {
            out.set2(i, j, exps[j] / sum);
        }
    }
    out
}

fn softmax_backward_rows(a: &Tensor, da: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut ds = Tensor::zeros_like(a);
    for i in 0..m {
        let mut inner = 0.0;
        for j in 0..n {
            inner += da.at2(i, j) * a.at2(i, j);
        }
        for j in 0..n {
            ds.set2(i, j, a.at2(i, j) * (da.at2(i, j) - inner));
        }
    }
    ds
}

// ---------------------------------------------------------------------------
// loss

/// Mean negative log-softmax of the true class; returns (loss, ∇logits).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    assert_eq!(labels.len(), b, "one label per row");
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArg(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs.at2(i, y).max(f64::MIN_POSITIVE).ln();
    }
    loss /= b as f64;
    let mut grad = probs;
    for (i, &y) in labels.iter().enumerate() {
        let v = grad.at2(i, y) - 1.0;
        grad.set2(i, y, v);
    }
    grad.scale_in_place(1.0 / b as f64);
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// gradient checking

/// Central-difference check of an analytic gradient against a scalar
/// objective. Returns the worst relative error, with an absolute floor of
/// 1e-8 in the denominator.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> f64,
    theta: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArg(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    assert_eq!(theta.shape(), analytic.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic.data()[i];
        let rel = (fd - an).abs() / an.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
