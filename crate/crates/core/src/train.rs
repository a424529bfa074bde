//! Training loop and experiment harness: minibatch optimization with
//! coupled/decoupled decay, per-epoch evaluation and diagnostics, metric
//! traces with a byte-stable CSV form, JSON checkpoints, and the grid
//! runner.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OptKind, Task};
use crate::data::{gen_blobs_cls, gen_patches_cls, gen_seq_copy, Dataset, SeqDataset};
use crate::diag::{effective_step_size, factored_norms, norm_matching_controller, nuclear_trace};
use crate::factor::{crs_lambda, CompressionReport};
use crate::layers::softmax_cross_entropy;
use crate::model::{build_model, decay_exempt, AttnModel, Model, ParamSlot};
use crate::opt::{flambe_step, lamb_step, sgd_step, LambState, SgdState};
use crate::reg::{fd_gradients, wd_gradients, DecayMode, MhaTarget};
use crate::rng::Xoshiro256;
use crate::tensor::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub phase: Phase,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric log with nondecreasing steps per phase and finite
/// values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricTrace {
    pub rows: Vec<MetricRow>,
}

impl MetricTrace {
    pub fn push(&mut self, step: u64, phase: Phase, metric: &str, value: f64) {
        assert!(value.is_finite(), "non-finite value for metric {metric} at step {step}");
        if let Some(last) = self.rows.iter().rev().find(|r| r.phase == phase) {
            assert!(last.step <= step, "steps must be nondecreasing within a phase");
        }
        self.rows.push(MetricRow { step, phase, metric: metric.to_string(), value });
    }

    /// `step,phase,metric,value` with `\n` endings and shortest-roundtrip
    /// decimal reals — identical runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,phase,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.phase, r.metric, r.value));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OptState {
    Sgd(SgdState),
    Lamb(LambState),
}

/// Full training state at an epoch boundary; JSON round-trips exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub rng: Xoshiro256,
    pub model: Model,
    pub opt: OptState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArg(format!("checkpoint parse: {e}")))
    }
}

pub struct RunResult {
    pub trace: MetricTrace,
    pub model: Model,
    pub final_eval_accuracy: f64,
    pub final_eval_loss: f64,
    /// Checkpoint captured after `checkpoint_epoch`, when configured.
    pub checkpoint: Option<Checkpoint>,
    /// Recomposed per-layer Frobenius norms after every optimizer step
    /// (empty for unfactorized models); consumed by the norm-matching
    /// control run.
    pub step_norms: Vec<Vec<f64>>,
}

enum Batches {
    Vector(Dataset),
    Seq(SeqDataset),
}

/// Draws train and eval splits from one stream so both share the task's
/// seed-dependent structure (e.g. blob class means).
fn make_data(cfg: &ExperimentConfig) -> (Batches, Batches) {
    let d = &cfg.data;
    let n = d.train_n + d.eval_n;
    match cfg.task {
        Task::BlobsCls | Task::PatchesCls => {
            let ds = match cfg.task {
                Task::BlobsCls => gen_blobs_cls(n, d.classes, d.dim, d.noise, cfg.seed),
                _ => gen_patches_cls(n, d.noise, cfg.seed),
            };
            let train_idx: Vec<usize> = (0..d.train_n).collect();
            let eval_idx: Vec<usize> = (d.train_n..n).collect();
            let (ti, tl) = ds.gather(&train_idx);
            let (ei, el) = ds.gather(&eval_idx);
            (
                Batches::Vector(Dataset { inputs: ti, labels: tl, classes: ds.classes }),
                Batches::Vector(Dataset { inputs: ei, labels: el, classes: ds.classes }),
            )
        }
        Task::SeqCopy => {
            let ds = gen_seq_copy(n, d.seq_len, d.vocab, cfg.seed);
            let eval_seqs = ds.seqs[d.train_n..].to_vec();
            let train_seqs = ds.seqs[..d.train_n].to_vec();
            (
                Batches::Seq(SeqDataset { seqs: train_seqs, vocab: ds.vocab }),
                Batches::Seq(SeqDataset { seqs: eval_seqs, vocab: ds.vocab }),
            )
        }
    }
}

fn eval_feedforward(model: &mut Model, ds: &Dataset) -> (f64, f64) {
    let logits = model.forward_logits(&ds.inputs, false);
    let (loss, _) = softmax_cross_entropy(&logits, &ds.labels).expect("eval loss");
    let mut correct = 0;
    for (i, &y) in ds.labels.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..logits.cols() {
            if logits.at2(i, j) > best.0 {
                best = (logits.at2(i, j), j);
            }
        }
        if best.1 == y {
            correct += 1;
        }
    }
    (loss, correct as f64 / ds.len() as f64)
}

fn eval_attn(am: &AttnModel, ds: &SeqDataset) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in &ds.seqs {
        let (logits, _) = am.forward_seq(seq);
        let (l, _) = softmax_cross_entropy(&logits, seq).expect("eval loss");
        loss += l;
        for (i, &y) in seq.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..logits.cols() {
                if logits.at2(i, j) > best.0 {
                    best = (logits.at2(i, j), j);
                }
            }
            if best.1 == y {
                correct += 1;
            }
            total += 1;
        }
    }
    (loss / ds.seqs.len() as f64, correct as f64 / total as f64)
}

/// Adds coupled decay gradients (SGD path) after the data-loss backward.
fn apply_coupled_decay(model: &mut Model, cfg: &ExperimentConfig, crs: Option<&CompressionReport>) {
    let decay = &cfg.decay;
    if decay.mode == DecayMode::None || decay.lambda == 0.0 {
        return;
    }
    let lambda = decay.lambda;
    for slot in model.param_slots() {
        match slot {
            ParamSlot::Dense(p) => {
                if !decay_exempt(&p.name) {
                    // every scheme reduces to λ·W on an unfactorized matrix
                    p.grad.add_scaled(&p.value, lambda);
                }
            }
            ParamSlot::Factored(fp) => match decay.mode {
                DecayMode::Wd => wd_gradients(fp, lambda),
                DecayMode::Crs => {
                    let report = crs.expect("CRS requires a compression report");
                    wd_gradients(fp, crs_lambda(lambda, report));
                }
                DecayMode::Fd => {
                    if decay.mha_target == MhaTarget::OvOnly && fp.name.ends_with(".qk") {
                        continue;
                    }
                    fd_gradients(fp, lambda);
                }
                DecayMode::None => unreachable!(),
            },
        }
    }
}

/// One optimizer step over every parameter, in traversal order.
fn optimizer_step(
    model: &mut Model,
    cfg: &ExperimentConfig,
    opt: &mut OptState,
    lr: f64,
    crs: Option<&CompressionReport>,
) {
    let decay = &cfg.decay;
    for slot in model.param_slots() {
        match (slot, &mut *opt) {
            (ParamSlot::Dense(p), OptState::Sgd(st)) => {
                sgd_step(&p.name, &mut p.value, &p.grad, st, lr);
            }
            (ParamSlot::Factored(fp), OptState::Sgd(st)) => {
                let name = fp.name.clone();
                sgd_step(&format!("{name}.u"), &mut fp.u, &fp.u_grad, st, lr);
                for j in 0..fp.inner.len() {
                    sgd_step(&format!("{name}.m{j}"), &mut fp.inner[j], &fp.inner_grad[j], st, lr);
                }
                sgd_step(&format!("{name}.v"), &mut fp.v, &fp.v_grad, st, lr);
            }
            (ParamSlot::Dense(p), OptState::Lamb(st)) => {
                let lambda = if decay_exempt(&p.name) || decay.mode == DecayMode::None {
                    0.0
                } else {
                    decay.lambda
                };
                lamb_step(&p.name, &mut p.value, &p.grad, st, lr, lambda);
            }
            (ParamSlot::Factored(fp), OptState::Lamb(st)) => {
                let name = fp.name.clone();
                match (cfg.optimizer, decay.mode) {
                    (OptKind::Flambe, DecayMode::Fd) if fp.depth() == 0 => {
                        let lambda = if decay.mha_target == MhaTarget::OvOnly
                            && name.ends_with(".qk")
                        {
                            0.0
                        } else {
                            decay.lambda
                        };
                        flambe_step(
                            &name,
                            &mut fp.u,
                            &mut fp.v,
                            &fp.u_grad,
                            &fp.v_grad,
                            st,
                            lr,
                            lambda,
                        );
                    }
                    _ => {
                        if cfg.optimizer == OptKind::Flambe && fp.depth() > 0 {
                            eprintln!(
                                "warning: {name} has inner factors; falling back to factor-wise decay"
                            );
                        }
                        let lambda = match decay.mode {
                            DecayMode::None => 0.0,
                            DecayMode::Crs => {
                                crs_lambda(decay.lambda, crs.expect("CRS rate"))
                            }
                            _ => decay.lambda,
                        };
                        lamb_step(&format!("{name}.u"), &mut fp.u, &fp.u_grad, st, lr, lambda);
                        for j in 0..fp.inner.len() {
                            lamb_step(
                                &format!("{name}.m{j}"),
                                &mut fp.inner[j],
                                &fp.inner_grad[j],
                                st,
                                lr,
                                lambda,
                            );
                        }
                        lamb_step(&format!("{name}.v"), &mut fp.v, &fp.v_grad, st, lr, lambda);
                    }
                }
            }
        }
    }
}

fn record_eval(
    trace: &mut MetricTrace,
    model: &mut Model,
    step: u64,
    lr: f64,
    loss: f64,
    acc: f64,
) {
    trace.push(step, Phase::Eval, "loss", loss);
    trace.push(step, Phase::Eval, "accuracy", acc);
    let factored = !model.factored().is_empty();
    if factored {
        trace.push(step, Phase::Eval, "eff_step_size", effective_step_size(model, lr));
        if model.factored().iter().all(|fp| fp.depth() == 0) {
            let (nuc, bound) = nuclear_trace(model);
            trace.push(step, Phase::Eval, "nuclear_mean", nuc);
            trace.push(step, Phase::Eval, "eq2_bound_mean", bound);
        }
        for fp in model.factored() {
            let norm = fp.recompose().frobenius_norm();
            trace.push(step, Phase::Eval, &format!("norm.{}", fp.name), norm);
        }
    }
}

/// Runs training from scratch or from a checkpoint, optionally matching
/// per-step factor norms against a reference run's recorded norms.
pub fn train_with(
    cfg: &ExperimentConfig,
    resume: Option<&Checkpoint>,
    match_norms: Option<&[Vec<f64>]>,
) -> Result<RunResult> {
    cfg.validate()?;
    let (train_ds, eval_ds) = make_data(cfg);

    let (mut model, mut opt, mut rng, mut step, start_epoch) = match resume {
        Some(ck) => {
            if ck.config_hash != cfg.hash() {
                return Err(Error::InvalidArg("checkpoint does not match this config".into()));
            }
            (ck.model.clone(), ck.opt.clone(), ck.rng.clone(), ck.step, ck.epoch)
        }
        None => {
            let model = build_model(cfg)?;
            let opt = match cfg.optimizer {
                OptKind::Sgd => OptState::Sgd(SgdState::new(0.9)),
                OptKind::Lamb | OptKind::Flambe => OptState::Lamb(LambState::new()),
            };
            (model, opt, Xoshiro256::stream(cfg.seed, 0x7a11), 0, 0)
        }
    };
    let crs_report = model.compression_report();

    let mut trace = MetricTrace::default();
    let mut step_norms: Vec<Vec<f64>> = Vec::new();
    let mut checkpoint: Option<Checkpoint> = None;

    // initial eval so a 0-epoch run still reports metrics
    let (loss0, acc0) = match (&mut model, &train_ds, &eval_ds) {
        (m @ Model::Feedforward(_), _, Batches::Vector(ev)) => eval_feedforward(m, ev),
        (Model::Attn(am), _, Batches::Seq(ev)) => eval_attn(am, ev),
        _ => unreachable!("task/arch pairing enforced by validate"),
    };
    record_eval(&mut trace, &mut model, step, cfg.lr.lr(step), loss0, acc0);

    let n = match &train_ds {
        Batches::Vector(ds) => ds.len(),
        Batches::Seq(ds) => ds.seqs.len(),
    };

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue; // normalization needs more than one sample
            }
            let lr = cfg.lr.lr(step);
            model.zero_grad();
            let loss = match (&mut model, &train_ds) {
                (Model::Feedforward(net), Batches::Vector(ds)) => {
                    let (x, y) = ds.gather(batch);
                    let (logits, caches) = net.forward(&x, true);
                    let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
                    net.backward(&caches, &dlogits);
                    loss
                }
                (Model::Attn(am), Batches::Seq(ds)) => {
                    let scale = 1.0 / batch.len() as f64;
                    let mut loss = 0.0;
                    for &i in batch {
                        let seq = &ds.seqs[i];
                        let (logits, cache) = am.forward_seq(seq);
                        let (l, mut dlogits) = softmax_cross_entropy(&logits, seq)?;
                        dlogits.scale_in_place(scale);
                        am.backward_seq(seq, &cache, &dlogits);
                        loss += l * scale;
                    }
                    loss
                }
                _ => unreachable!(),
            };
            if !loss.is_finite() {
                return Err(Error::InvalidArg(format!(
                    "training aborted: non-finite loss at step {step} (epoch {epoch})"
                )));
            }
            if matches!(opt, OptState::Sgd(_)) {
                apply_coupled_decay(&mut model, cfg, crs_report.as_ref());
            }
            optimizer_step(&mut model, cfg, &mut opt, lr, crs_report.as_ref());
            if let Some(reference) = match_norms {
                let idx = step_norms.len();
                assert!(idx < reference.len(), "reference norm trace too short");
                norm_matching_controller(&mut model, &reference[idx])?;
            }
            if !model.factored().is_empty() {
                step_norms.push(factored_norms(&model));
            }
            trace.push(step, Phase::Train, "loss", loss);
            step += 1;
        }
        let lr = cfg.lr.lr(step);
        let (loss, acc) = match (&mut model, &eval_ds) {
            (m @ Model::Feedforward(_), Batches::Vector(ev)) => eval_feedforward(m, ev),
            (Model::Attn(am), Batches::Seq(ev)) => eval_attn(am, ev),
            _ => unreachable!(),
        };
        record_eval(&mut trace, &mut model, step, lr, loss, acc);
        if cfg.checkpoint_epoch > 0 && epoch + 1 == cfg.checkpoint_epoch {
            checkpoint = Some(Checkpoint {
                config_hash: cfg.hash(),
                epoch: epoch + 1,
                step,
                rng: rng.clone(),
                model: model.clone(),
                opt: opt.clone(),
            });
        }
    }

    let (final_eval_loss, final_eval_accuracy) = {
        let last_loss = trace
            .rows
            .iter()
            .rev()
            .find(|r| r.phase == Phase::Eval && r.metric == "loss")
            .map(|r| r.value)
            .unwrap_or(f64::NAN);
        let last_acc = trace
            .rows
            .iter()
            .rev()
            .find(|r| r.phase == Phase::Eval && r.metric == "accuracy")
            .map(|r| r.value)
            .unwrap_or(f64::NAN);
        (last_loss, last_acc)
    };

    Ok(RunResult {
        trace,
        model,
        final_eval_accuracy,
        final_eval_loss,
        checkpoint,
        step_norms,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<RunResult> {
    train_with(cfg, None, None)
}

// ---------------------------------------------------------------------------
// suite runner

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteGrid {
    pub configs: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
}

/// Runs every config at every seed; per-run failures are recorded and the
/// suite continues. Returns (summary CSV, all runs succeeded).
pub fn run_suite(grid: &SuiteGrid) -> (String, bool) {
    let mut out = String::from("config,seed,status,accuracy,loss\n");
    let mut all_ok = true;
    for cfg in &grid.configs {
        let mut accs = Vec::new();
        for &seed in &grid.seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            match train(&run_cfg) {
                Ok(res) => {
                    out.push_str(&format!(
                        "{},{},ok,{},{}\n",
                        cfg.name, seed, res.final_eval_accuracy, res.final_eval_loss
                    ));
                    accs.push(res.final_eval_accuracy);
                }
                Err(e) => {
                    all_ok = false;
                    out.push_str(&format!("{},{},error: {},,\n", cfg.name, seed, e));
                }
            }
        }
        if !accs.is_empty() {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / accs.len() as f64;
            out.push_str(&format!("{},summary,mean±std,{},{}\n", cfg.name, mean, var.sqrt()));
        }
    }
    (out, all_ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Arch;
    use crate::factor::FactorMode;
    use crate::config::FactorizeConfig;
    use crate::opt::LrSchedule;
    use crate::reg::DecayConfig;

    fn quick_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset("blobs_mlp").unwrap();
        cfg.epochs = 2;
        cfg.data.train_n = 80;
        cfg.data.eval_n = 80;
        cfg
    }

    #[test]
    fn zero_epochs_returns_init_metrics() {
        let mut cfg = quick_cfg();
        cfg.epochs = 0;
        let res = train(&cfg).unwrap();
        assert!(res.final_eval_loss.is_finite());
        assert!(res.trace.rows.iter().all(|r| r.step == 0));
    }

    #[test]
    fn metric_csv_is_deterministic() {
        let cfg = quick_cfg();
        let a = train(&cfg).unwrap().trace.to_csv();
        let b = train(&cfg).unwrap().trace.to_csv();
        assert_eq!(a, b, "identical config+seed must produce identical CSV bytes");
        let mut cfg2 = cfg.clone();
        cfg2.seed = 9;
        let c = train(&cfg2).unwrap().trace.to_csv();
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_mlp_trains() {
        let mut cfg = ExperimentConfig::preset("blobs_mlp").unwrap();
        cfg.data.train_n = 160;
        cfg.data.eval_n = 160;
        let res = train(&cfg).unwrap();
        assert!(
            res.final_eval_accuracy >= 0.95,
            "separable blobs should train to ≥ 95%, got {}",
            res.final_eval_accuracy
        );
    }

    #[test]
    fn checkpoint_round_trip_identical_trace() {
        let mut cfg = quick_cfg();
        cfg.epochs = 4;
        cfg.checkpoint_epoch = 2;
        cfg.factorize = FactorizeConfig {
            enabled: true,
            mode: FactorMode::LowRank,
            scale: 0.5,
            spectral: true,
            depth: 1,
        };
        let full = train(&cfg).unwrap();
        let ck = full.checkpoint.clone().expect("checkpoint captured");
        let ck = Checkpoint::from_json(&ck.to_json()).unwrap(); // exercise JSON round trip
        let resumed = train_with(&cfg, Some(&ck), None).unwrap();
        // the resumed trace must equal the tail of the full trace after the
        // checkpointed epoch's eval block
        let cut = full
            .trace
            .rows
            .iter()
            .rposition(|r| r.step == ck.step && r.phase == Phase::Eval)
            .unwrap()
            + 1;
        let tail: Vec<String> = full.trace.rows[cut..]
            .iter()
            .map(|r| format!("{},{},{},{}", r.step, r.phase, r.metric, r.value))
            .collect();
        let resumed_rows: Vec<String> = resumed
            .trace
            .rows
            .iter()
            .skip_while(|r| r.step == ck.step && r.phase == Phase::Eval) // initial eval duplicate
            .map(|r| format!("{},{},{},{}", r.step, r.phase, r.metric, r.value))
            .collect();
        assert_eq!(resumed_rows, tail, "resumed trace must match uninterrupted run");
        assert_eq!(
            full.final_eval_accuracy, resumed.final_eval_accuracy,
            "final metrics must be identical"
        );
    }

    #[test]
    fn checkpoint_config_mismatch_rejected() {
        let mut cfg = quick_cfg();
        cfg.checkpoint_epoch = 1;
        let res = train(&cfg).unwrap();
        let ck = res.checkpoint.unwrap();
        let mut other = cfg.clone();
        other.seed = 77;
        assert!(train_with(&other, Some(&ck), None).is_err());
    }

    #[test]
    fn suite_emits_rows_and_summary() {
        let mut cfg = quick_cfg();
        cfg.epochs = 1;
        let grid = SuiteGrid { configs: vec![cfg], seeds: vec![1, 2, 3] };
        let (csv, ok) = run_suite(&grid);
        assert!(ok);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1, "header + 3 runs + summary");
        assert!(lines[4].contains("summary"));
        let (csv2, _) = run_suite(&grid);
        assert_eq!(csv, csv2, "suite rerun must be byte-identical");
    }

    #[test]
    fn attn_task_smoke() {
        let mut cfg = ExperimentConfig::preset("attn_flambe").unwrap();
        cfg.epochs = 2;
        cfg.data.train_n = 40;
        cfg.data.eval_n = 40;
        cfg.arch = Arch::TinyAttn;
        let res = train(&cfg).unwrap();
        assert!(res.final_eval_loss.is_finite());
        assert!(!res.step_norms.is_empty());
    }

    #[test]
    fn norm_matching_tracks_reference() {
        let mut cfg = quick_cfg();
        cfg.epochs = 2;
        cfg.factorize = FactorizeConfig {
            enabled: true,
            mode: FactorMode::LowRank,
            scale: 0.5,
            spectral: true,
            depth: 1,
        };
        cfg.decay = DecayConfig { mode: DecayMode::Fd, lambda: 0.01, ..Default::default() };
        let reference = train(&cfg).unwrap();
        let mut control = cfg.clone();
        control.decay = DecayConfig::default();
        let matched = train_with(&control, None, Some(&reference.step_norms)).unwrap();
        // after every step the matched run's norms equal the reference's
        for (a, b) in matched.step_norms.iter().zip(&reference.step_norms) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10 * y.max(1.0), "norm {x} vs target {y}");
            }
        }
    }

    #[test]
    fn lr_schedule_feeds_trace() {
        let mut cfg = quick_cfg();
        cfg.lr = LrSchedule::StepDecay { base: 0.1, milestones: vec![4] };
        let res = train(&cfg).unwrap();
        assert!(res.final_eval_loss.is_finite());
    }
}
