//! Model assembly: the three reference architectures, the factorization
//! policy ("all layers except the first and last"), forward/backward passes,
//! parameter traversal, and collapse of factorized weights for inference.

use serde::{Deserialize, Serialize};

use crate::config::{Arch, ExperimentConfig, FactorizeConfig};
use crate::factor::{
    rank_from_scale, spectral_init, CompressionReport, FactorMode, FactorizedParam,
};
use crate::layers::{
    avgpool2_backward, avgpool2_forward, conv2d_backward, conv2d_forward, fc_backward, fc_forward,
    kernel_to_matrix, matrix_to_kernel, relu_backward, relu_forward, BatchNorm, MhaCache, MhaHead,
    MhaLayer, Parameter,
};
use crate::rng::{gaussian_from, Xoshiro256};
use crate::tensor::{Error, Result, Tensor};

/// A weight matrix stored either directly or as a factor product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum WeightParam {
    Dense(Parameter),
    Factored(FactorizedParam),
}

impl WeightParam {
    /// The composed matrix used by the forward pass.
    pub fn composed(&self) -> Tensor {
        match self {
            WeightParam::Dense(p) => p.value.clone(),
            WeightParam::Factored(fp) => fp.recompose(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            WeightParam::Dense(p) => &p.name,
            WeightParam::Factored(fp) => &fp.name,
        }
    }

    /// Routes a gradient w.r.t. the composed matrix into the right buffers.
    pub fn accumulate(&mut self, dw: &Tensor) {
        match self {
            WeightParam::Dense(p) => p.grad.add_scaled(dw, 1.0),
            WeightParam::Factored(fp) => fp.accumulate_from_composed(dw),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            WeightParam::Dense(p) => p.zero_grad(),
            WeightParam::Factored(fp) => fp.zero_grad(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    Fc { w: WeightParam, bias: Parameter },
    Conv { w: WeightParam, c_out: usize, c_in: usize, k: usize, stride: usize },
    Norm(BatchNorm),
    Relu,
    Pool,
    Flatten,
}

/// Per-layer forward cache for one minibatch.
pub enum Cache {
    Input(Tensor),
    Mask(Vec<bool>),
    Shape(Vec<usize>),
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Net {
    pub layers: Vec<Layer>,
}

impl Net {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, Vec<Cache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            match layer {
                Layer::Fc { w, bias } => {
                    caches.push(Cache::Input(h.clone()));
                    let mut out = fc_forward(&w.composed(), &h);
                    let b = bias.value.data();
                    for i in 0..out.rows() {
                        for j in 0..out.cols() {
                            let v = out.at2(i, j) + b[j];
                            out.set2(i, j, v);
                        }
                    }
                    h = out;
                }
                Layer::Conv { w, c_out, c_in, k, stride } => {
                    caches.push(Cache::Input(h.clone()));
                    let kernel = matrix_to_kernel(&w.composed(), *c_out, *c_in, *k);
                    h = conv2d_forward(&kernel, &h, *stride).expect("conv forward");
                }
                Layer::Norm(bn) => {
                    caches.push(Cache::None);
                    h = bn.forward(&h, train);
                }
                Layer::Relu => {
                    let (out, mask) = relu_forward(&h);
                    caches.push(Cache::Mask(mask));
                    h = out;
                }
                Layer::Pool => {
                    caches.push(Cache::Shape(h.shape().to_vec()));
                    h = avgpool2_forward(&h);
                }
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let flat: usize = shape[1..].iter().product();
                    h = h.reshape(vec![shape[0], flat]);
                    caches.push(Cache::Shape(shape));
                }
            }
        }
        (h, caches)
    }

    pub fn backward(&mut self, caches: &[Cache], dout: &Tensor) {
        let mut g = dout.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            match (layer, cache) {
                (Layer::Fc { w, bias }, Cache::Input(x)) => {
                    let bg = bias.grad.data_mut();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            bg[j] += g.at2(i, j);
                        }
                    }
                    let (dw, dx) = fc_backward(&w.composed(), x, &g);
                    w.accumulate(&dw);
                    g = dx;
                }
                (Layer::Conv { w, c_out, c_in, k, stride }, Cache::Input(x)) => {
                    let kernel = matrix_to_kernel(&w.composed(), *c_out, *c_in, *k);
                    let (dk, dx) = conv2d_backward(&kernel, x, &g, *stride);
                    w.accumulate(&kernel_to_matrix(&dk));
                    g = dx;
                }
                (Layer::Norm(bn), Cache::None) => {
                    g = bn.backward(&g);
                }
                (Layer::Relu, Cache::Mask(mask)) => {
                    g = relu_backward(&g, mask);
                }
                (Layer::Pool, Cache::Shape(shape)) => {
                    g = avgpool2_backward(&g, shape);
                }
                (Layer::Flatten, Cache::Shape(shape)) => {
                    g = g.reshape(shape.clone());
                }
                _ => unreachable!("cache/layer mismatch"),
            }
        }
    }
}

/// Fixed sinusoidal position encoding, T×d.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut pos = Tensor::zeros(vec![t, d]);
    for i in 0..t {
        for j in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * j as f64 / d as f64);
            pos.set2(i, 2 * j, (i as f64 * freq).sin());
            pos.set2(i, 2 * j + 1, (i as f64 * freq).cos());
        }
    }
    pos
}

/// Token embedding → (x + attention(x)) residual block → vocabulary logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnModel {
    pub embed: Parameter,
    pub pos: Tensor,
    pub mha: MhaLayer,
    pub out: Parameter,
    pub d_model: usize,
    pub vocab: usize,
}

pub struct AttnCache {
    x: Tensor,
    mha: MhaCache,
    h: Tensor,
}

impl AttnModel {
    pub fn forward_seq(&self, tokens: &[usize]) -> (Tensor, AttnCache) {
        let t = tokens.len();
        let d = self.d_model;
        let mut x = Tensor::zeros(vec![t, d]);
        for (i, &tok) in tokens.iter().enumerate() {
            assert!(tok < self.vocab, "token {tok} out of vocabulary");
            for j in 0..d {
                x.set2(i, j, self.embed.value.at2(tok, j) + self.pos.at2(i, j));
            }
        }
        let (attn, mha_cache) = self.mha.forward(&x);
        let h = x.add(&attn);
        let logits = fc_forward(&self.out.value, &h);
        (logits, AttnCache { x, mha: mha_cache, h })
    }

    pub fn backward_seq(&mut self, tokens: &[usize], cache: &AttnCache, dlogits: &Tensor) {
        let (dout, dh) = fc_backward(&self.out.value, &cache.h, dlogits);
        self.out.grad.add_scaled(&dout, 1.0);
        let dattn = self.mha.backward(&cache.x, &cache.mha, &dh);
        // residual: dx = dh + d(attn path)
        let dx = dh.add(&dattn);
        for (i, &tok) in tokens.iter().enumerate() {
            for j in 0..self.d_model {
                let idx = tok * self.d_model + j;
                self.embed.grad.data_mut()[idx] += dx.at2(i, j);
            }
        }
    }
}

/// Any trainable model in the harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Model {
    Feedforward(Net),
    Attn(AttnModel),
}

/// Mutable view of one trainable unit, in deterministic traversal order.
pub enum ParamSlot<'a> {
    Dense(&'a mut Parameter),
    Factored(&'a mut FactorizedParam),
}

/// True for parameters excluded from every decay scheme (normalization
/// affine terms and biases).
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias")
}

impl Model {
    pub fn zero_grad(&mut self) {
        for slot in self.param_slots() {
            match slot {
                ParamSlot::Dense(p) => p.zero_grad(),
                ParamSlot::Factored(fp) => fp.zero_grad(),
            }
        }
    }

    /// All trainable units in a fixed order.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        match self {
            Model::Feedforward(net) => {
                for layer in &mut net.layers {
                    match layer {
                        Layer::Fc { w, bias } => {
                            match w {
                                WeightParam::Dense(p) => slots.push(ParamSlot::Dense(p)),
                                WeightParam::Factored(fp) => slots.push(ParamSlot::Factored(fp)),
                            }
                            slots.push(ParamSlot::Dense(bias));
                        }
                        Layer::Conv { w, .. } => match w {
                            WeightParam::Dense(p) => slots.push(ParamSlot::Dense(p)),
                            WeightParam::Factored(fp) => slots.push(ParamSlot::Factored(fp)),
                        },
                        Layer::Norm(bn) => {
                            slots.push(ParamSlot::Dense(&mut bn.gamma));
                            slots.push(ParamSlot::Dense(&mut bn.beta));
                        }
                        _ => {}
                    }
                }
            }
            Model::Attn(am) => {
                slots.push(ParamSlot::Dense(&mut am.embed));
                for head in &mut am.mha.heads {
                    slots.push(ParamSlot::Factored(&mut head.qk));
                    slots.push(ParamSlot::Factored(&mut head.ov));
                }
                slots.push(ParamSlot::Dense(&mut am.out));
            }
        }
        slots
    }

    /// Immutable views of the factorized parameters, same order.
    pub fn factored(&self) -> Vec<&FactorizedParam> {
        let mut out = Vec::new();
        match self {
            Model::Feedforward(net) => {
                for layer in &net.layers {
                    if let Layer::Fc { w: WeightParam::Factored(fp), .. }
                    | Layer::Conv { w: WeightParam::Factored(fp), .. } = layer
                    {
                        out.push(fp);
                    }
                }
            }
            Model::Attn(am) => {
                for head in &am.mha.heads {
                    out.push(&head.qk);
                    out.push(&head.ov);
                }
            }
        }
        out
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        let mut model = self.clone();
        let mut n = 0;
        for slot in model.param_slots() {
            n += match slot {
                ParamSlot::Dense(p) => p.value.len(),
                ParamSlot::Factored(fp) => fp.train_param_count(),
            };
        }
        n
    }

    /// Parameter accounting over factorized layers: trainable factor counts
    /// against the unfactorized target sizes.
    pub fn compression_report(&self) -> Option<CompressionReport> {
        let fps = self.factored();
        if fps.is_empty() {
            return None;
        }
        let original: usize = fps.iter().map(|fp| fp.target_shape.0 * fp.target_shape.1).sum();
        let factorized: usize = fps.iter().map(|fp| fp.train_param_count()).sum();
        Some(CompressionReport::new(original, factorized))
    }

    /// Replaces every factorized weight with its recomposed dense matrix.
    /// Attention models keep their factor pairs (the architecture is defined
    /// by them).
    pub fn collapse(&mut self) {
        if let Model::Feedforward(net) = self {
            for layer in &mut net.layers {
                let w = match layer {
                    Layer::Fc { w, .. } | Layer::Conv { w, .. } => w,
                    _ => continue,
                };
                if let WeightParam::Factored(fp) = w {
                    let dense = Parameter::new(fp.name.clone(), fp.recompose());
                    *w = WeightParam::Dense(dense);
                }
            }
        }
    }

    pub fn forward_logits(&mut self, x: &Tensor, train: bool) -> Tensor {
        match self {
            Model::Feedforward(net) => net.forward(x, train).0,
            Model::Attn(_) => panic!("attention models take token sequences"),
        }
    }
}

// ---------------------------------------------------------------------------
// construction

fn dense_init(name: &str, m: usize, n: usize, rng: &mut Xoshiro256) -> Parameter {
    let std = (2.0 / n as f64).sqrt();
    Parameter::new(name, gaussian_from(vec![m, n], std, rng))
}

/// Factorizes an m×n weight drawn by `init` according to the policy:
/// spectral initialization truncates the dense draw; otherwise factors are
/// drawn directly. Overcomplete spectral modes pad the factors with zero
/// columns beyond rank min(m, n), which reproduces the dense draw exactly.
fn factorize_weight(
    name: &str,
    m: usize,
    n: usize,
    rank: usize,
    fc: &FactorizeConfig,
    rng: &mut Xoshiro256,
) -> Result<FactorizedParam> {
    let depth = match fc.mode {
        FactorMode::Deep => fc.depth.max(1),
        _ => 0,
    };
    let r = match fc.mode {
        FactorMode::LowRank => {
            if rank > m.min(n) {
                return Err(Error::InvalidArg(format!(
                    "rank {rank} infeasible for layer {name} ({m}×{n})"
                )));
            }
            rank
        }
        FactorMode::Full | FactorMode::Deep => m,
        FactorMode::Wide => 3 * m,
    };
    if fc.spectral {
        let std = (2.0 / n as f64).sqrt();
        let dense = gaussian_from(vec![m, n], std, rng);
        let trunc = spectral_init(name, &dense, r.min(m.min(n)))?;
        if r <= m.min(n) {
            let mut fp = trunc;
            fp.mode = fc.mode;
            if depth > 0 {
                let inner: Vec<Tensor> = (0..depth).map(|_| Tensor::eye(r)).collect();
                fp = FactorizedParam::new(name, fp.u, inner, fp.v, fc.mode, (m, n));
            }
            return Ok(fp);
        }
        // overcomplete: pad with zero columns; U·Vᵀ still equals the draw
        let base = r.min(m.min(n));
        let mut u = Tensor::zeros(vec![m, r]);
        let mut v = Tensor::zeros(vec![n, r]);
        for j in 0..base {
            for i in 0..m {
                u.set2(i, j, trunc.u.at2(i, j));
            }
            for i in 0..n {
                v.set2(i, j, trunc.v.at2(i, j));
            }
        }
        let inner: Vec<Tensor> = (0..depth).map(|_| Tensor::eye(r)).collect();
        Ok(FactorizedParam::new(name, u, inner, v, fc.mode, (m, n)))
    } else {
        Ok(crate::factor::default_factor_init(name, m, n, r, depth, fc.mode, rng))
    }
}

fn make_weight(
    name: &str,
    m: usize,
    n: usize,
    rank: usize,
    factorize: bool,
    fc: &FactorizeConfig,
    rng: &mut Xoshiro256,
) -> Result<WeightParam> {
    if factorize && fc.enabled {
        Ok(WeightParam::Factored(factorize_weight(name, m, n, rank, fc, rng)?))
    } else {
        Ok(WeightParam::Dense(dense_init(name, m, n, rng)))
    }
}

/// Builds the architecture named in the config, applying the factorization
/// policy to every layer except the first and last.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut rng = Xoshiro256::stream(cfg.seed, 0x0de1);
    let fc = &cfg.factorize;
    match cfg.arch {
        Arch::Mlp => {
            let (dim, classes, hidden) = (cfg.data.dim, cfg.data.classes, 32);
            let rank = rank_from_scale(fc.scale, hidden, 1, hidden);
            let layers = vec![
                Layer::Fc {
                    w: WeightParam::Dense(dense_init("fc1.w", hidden, dim, &mut rng)),
                    bias: Parameter::new("fc1.bias", Tensor::zeros(vec![hidden])),
                },
                Layer::Norm(BatchNorm::new("bn1", hidden)),
                Layer::Relu,
                Layer::Fc {
                    w: make_weight("fc2.w", hidden, hidden, rank, true, fc, &mut rng)?,
                    bias: Parameter::new("fc2.bias", Tensor::zeros(vec![hidden])),
                },
                Layer::Norm(BatchNorm::new("bn2", hidden)),
                Layer::Relu,
                Layer::Fc {
                    w: WeightParam::Dense(dense_init("fc3.w", classes, hidden, &mut rng)),
                    bias: Parameter::new("fc3.bias", Tensor::zeros(vec![classes])),
                },
            ];
            Ok(Model::Feedforward(Net { layers }))
        }
        Arch::Smallcnn => {
            let classes = cfg.data.classes;
            let (c1, c2, k) = (8, 16, 3);
            // conv weights live as (c_out·k)×(c_in·k) matrices
            let rank = rank_from_scale(fc.scale, c2, k, c1);
            let conv1 = WeightParam::Dense(Parameter::new("conv1.w", {
                let std = (2.0 / (1.0 * (k * k) as f64)).sqrt();
                gaussian_from(vec![c1 * k, k], std, &mut rng)
            }));
            let conv2 = make_weight("conv2.w", c2 * k, c1 * k, rank, true, fc, &mut rng)?;
            let fc_in = c2 * 4 * 4; // 8×8 inputs, one 2×2 pool
            let layers = vec![
                Layer::Conv { w: conv1, c_out: c1, c_in: 1, k, stride: 1 },
                Layer::Norm(BatchNorm::new("bn1", c1)),
                Layer::Relu,
                Layer::Conv { w: conv2, c_out: c2, c_in: c1, k, stride: 1 },
                Layer::Norm(BatchNorm::new("bn2", c2)),
                Layer::Relu,
                Layer::Pool,
                Layer::Flatten,
                Layer::Fc {
                    w: WeightParam::Dense(dense_init("fc.w", classes, fc_in, &mut rng)),
                    bias: Parameter::new("fc.bias", Tensor::zeros(vec![classes])),
                },
            ];
            Ok(Model::Feedforward(Net { layers }))
        }
        Arch::TinyAttn => {
            let (vocab, d, heads) = (cfg.data.vocab, 16, 2);
            let r = d / heads;
            let embed = dense_init("embed", vocab, d, &mut rng);
            let std = 1.0 / (d as f64).sqrt();
            let mk_pair = |name: &str, rng: &mut Xoshiro256| {
                FactorizedParam::new(
                    name,
                    gaussian_from(vec![d, r], std, rng),
                    vec![],
                    gaussian_from(vec![d, r], std, rng),
                    FactorMode::LowRank,
                    (d, d),
                )
            };
            let head_list: Vec<MhaHead> = (0..heads)
                .map(|h| MhaHead {
                    qk: mk_pair(&format!("attn.h{h}.qk"), &mut rng),
                    ov: mk_pair(&format!("attn.h{h}.ov"), &mut rng),
                })
                .collect();
            let mha = MhaLayer::new(head_list, d, r)?;
            let out = dense_init("out.w", vocab, d, &mut rng);
            let pos = sinusoidal_positions(cfg.data.seq_len, d);
            Ok(Model::Attn(AttnModel { embed, pos, mha, out, d_model: d, vocab }))
        }
    }
}
