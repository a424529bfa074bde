//! Experiment CLI: train single runs, sweep config grids, verify library
//! invariants, and inspect checkpoints.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use factored::config::ExperimentConfig;
use factored::diag::{claim1_order_check, effective_step_size};
use factored::factor::spectral_init;
use factored::layers::{conv2d_forward, factorized_conv_forward, matrix_to_kernel};
use factored::model::ParamSlot;
use factored::reg::nuclear_bound_gap;
use factored::rng::{gaussian_from, random_gaussian, Xoshiro256};
use factored::svd::{nuclear_norm, svd};
use factored::train::{run_suite, train, Checkpoint, SuiteGrid};

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "FACTORED_OUT_DIR";

#[derive(Parser)]
#[command(name = "factored", about = "Training harness for factorized-layer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment from a config file (or preset name).
    Train {
        /// Path to a JSON experiment config, or a built-in preset name.
        #[arg(long)]
        config: String,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $FACTORED_OUT_DIR or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of configs × seeds and write a summary CSV.
    Suite {
        /// Path to a JSON grid: {"configs": [...], "seeds": [...]}.
        #[arg(long)]
        grid: PathBuf,
        /// Output directory (default: $FACTORED_OUT_DIR or ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle and invariant verifiers.
    Check,
    /// Print a norm/bound/update-order report for a saved checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(spec: &str) -> Result<ExperimentConfig, String> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| format!("read {spec}: {e}"))?;
        ExperimentConfig::from_json(&text).map_err(|e| e.to_string())
    } else if let Some(cfg) = ExperimentConfig::preset(spec) {
        Ok(cfg)
    } else {
        Err(format!("{spec} is neither a config file nor a known preset"))
    }
}

fn cmd_train(config: &str, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), String> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out_dir(out).join(format!("{}-seed{}", cfg.name, cfg.seed));
    std::fs::create_dir_all(&dir).map_err(|e| format!("create {}: {e}", dir.display()))?;
    let res = train(&cfg).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("config.json"), cfg.to_json()).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("trace.csv"), res.trace.to_csv()).map_err(|e| e.to_string())?;
    if let Some(ck) = &res.checkpoint {
        std::fs::write(dir.join("checkpoint.json"), ck.to_json()).map_err(|e| e.to_string())?;
    }
    println!(
        "{}: eval accuracy {:.4}, eval loss {:.6} (outputs in {})",
        cfg.name,
        res.final_eval_accuracy,
        res.final_eval_loss,
        dir.display()
    );
    Ok(())
}

fn cmd_suite(grid_path: &Path, out: Option<PathBuf>) -> Result<bool, String> {
    let text = std::fs::read_to_string(grid_path)
        .map_err(|e| format!("read {}: {e}", grid_path.display()))?;
    let grid: SuiteGrid =
        serde_json::from_str(&text).map_err(|e| format!("parse grid: {e}"))?;
    let (csv, ok) = run_suite(&grid);
    let dir = out_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("suite_summary.csv");
    std::fs::write(&path, &csv).map_err(|e| e.to_string())?;
    print!("{csv}");
    println!("summary written to {}", path.display());
    Ok(ok)
}

/// Library-level verifiers runnable without a config: each prints one
/// pass/fail line.
fn cmd_check() -> bool {
    let mut all = true;
    let mut verify = |name: &str, ok: bool, detail: String| {
        println!("{}: {name} ({detail})", if ok { "pass" } else { "FAIL" });
        all &= ok;
    };

    // spectral initialization balance: ‖U‖F = ‖V‖F and UᵀU = VᵀV = Σ_r
    {
        let w = random_gaussian(vec![12, 9], 0.3, 11).unwrap();
        let fp = spectral_init("check.w", &w, 5).unwrap();
        let bal = (fp.u.frobenius_norm() - fp.v.frobenius_norm()).abs();
        let gram_gap = fp
            .u
            .matmul_tn(&fp.u)
            .sub(&fp.v.matmul_tn(&fp.v))
            .frobenius_norm();
        verify(
            "spectral init balance",
            bal <= 1e-10 && gram_gap <= 1e-10,
            format!("norm gap {bal:.2e}, gram gap {gram_gap:.2e}"),
        );
    }

    // truncated SVD is the best rank-r approximation vs nuclear-norm tail
    {
        let w = random_gaussian(vec![10, 8], 0.5, 12).unwrap();
        let full = svd(&w, 8).unwrap();
        let trunc = svd(&w, 3).unwrap();
        let err = w.sub(&trunc.reconstruct()).frobenius_norm();
        let tail: f64 = full.singular_values[3..].iter().map(|s| s * s).sum::<f64>();
        let gap = (err * err - tail).abs();
        verify("rank-r SVD residual", gap <= 1e-8, format!("residual gap {gap:.2e}"));
    }

    // factor-norm bound: ½(‖U‖²F + ‖V‖²F) ≥ ‖UVᵀ‖*, tight at spectral init
    {
        let mut worst: f64 = 0.0;
        let mut rng = Xoshiro256::stream(13, 0xc4ec);
        for _ in 0..200 {
            let u = gaussian_from(vec![6, 4], 1.0, &mut rng);
            let v = gaussian_from(vec![5, 4], 1.0, &mut rng);
            let lhs = 0.5 * (u.frobenius_norm().powi(2) + v.frobenius_norm().powi(2));
            let rhs = nuclear_norm(&u.matmul_nt(&v));
            worst = worst.min(lhs - rhs);
        }
        let w = random_gaussian(vec![6, 5], 1.0, 14).unwrap();
        let fp = spectral_init("check.tight", &w, 4).unwrap();
        let (lhs, rhs, gap) = nuclear_bound_gap(&fp);
        verify(
            "factor-norm nuclear bound",
            worst >= -1e-9 && gap.abs() <= 1e-8 * lhs.max(rhs),
            format!("min sampled gap {worst:.2e}, init gap {gap:.2e}"),
        );
    }

    // factorized conv as two 1-d convolutions equals the dense 2-d conv
    {
        let c_out = 4;
        let c_in = 3;
        let k = 3;
        let w = random_gaussian(vec![c_out * k, c_in * k], 0.3, 15).unwrap();
        let fp = spectral_init("check.conv", &w, c_in * k).unwrap();
        let x = random_gaussian(vec![2, c_in, 8, 8], 0.8, 16).unwrap();
        let kernel = matrix_to_kernel(&fp.recompose(), c_out, c_in, k);
        let dense = conv2d_forward(&kernel, &x, 1).unwrap();
        let fast = factorized_conv_forward(&fp.u, &fp.v, &x, c_out, c_in, k);
        let gap = dense.sub(&fast).frobenius_norm();
        verify("separable conv equivalence", gap <= 1e-10, format!("gap {gap:.2e}"));
    }

    // projected-update order check: prediction error scales as η²
    {
        let mut rng = Xoshiro256::stream(17, 0x51de);
        let mut slopes = Vec::new();
        for _ in 0..20 {
            let u = gaussian_from(vec![6, 4], 1.0, &mut rng);
            let v = gaussian_from(vec![5, 4], 1.0, &mut rng);
            let g = gaussian_from(vec![6, 5], 1.0, &mut rng);
            if let Ok(Some(s)) = claim1_order_check(&u, &v, &g, &[1e-3, 1e-4, 1e-5]) {
                slopes.push(s);
            }
        }
        slopes.sort_by(|a, b| a.total_cmp(b));
        let median = slopes[slopes.len() / 2];
        verify(
            "projected update order",
            (1.8..=2.2).contains(&median),
            format!("median slope {median:.3}"),
        );
    }

    // bit-reproducibility of a short training run
    {
        let mut cfg = ExperimentConfig::preset("blobs_mlp").unwrap();
        cfg.epochs = 2;
        cfg.data.train_n = 80;
        cfg.data.eval_n = 80;
        let a = train(&cfg).unwrap().trace.to_csv();
        let b = train(&cfg).unwrap().trace.to_csv();
        verify(
            "trace reproducibility",
            a == b,
            format!("{} identical bytes", a.len()),
        );
    }

    all
}

fn cmd_diagnose(path: &Path) -> Result<(), String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    let ck = Checkpoint::from_json(&text).map_err(|e| e.to_string())?;
    let mut model = ck.model.clone();
    println!("checkpoint for config {} at epoch {}, step {}", ck.config_hash, ck.epoch, ck.step);
    if let Some(report) = model.compression_report() {
        println!(
            "compression: {} of {} parameters (rate {:.4})",
            report.factorized_params, report.original_params, report.rate
        );
    }
    for slot in model.param_slots() {
        match slot {
            ParamSlot::Dense(p) => {
                println!("  {}: dense, ‖W‖F = {:.6}", p.name, p.value.frobenius_norm());
            }
            ParamSlot::Factored(fp) => {
                let w = fp.recompose();
                print!(
                    "  {}: rank {}, depth {}, ‖U‖F = {:.6}, ‖V‖F = {:.6}, ‖W‖F = {:.6}",
                    fp.name,
                    fp.rank(),
                    fp.depth(),
                    fp.u.frobenius_norm(),
                    fp.v.frobenius_norm(),
                    w.frobenius_norm()
                );
                if fp.depth() == 0 {
                    let (lhs, rhs, gap) = nuclear_bound_gap(fp);
                    print!(", bound {lhs:.6} ≥ nuclear {rhs:.6} (gap {gap:.3e})");
                    let g = random_gaussian(w.shape().to_vec(), 1.0, 0xd1a6).unwrap();
                    if let Ok(Some(slope)) =
                        claim1_order_check(&fp.u, &fp.v, &g, &[1e-3, 1e-4, 1e-5])
                    {
                        print!(", update-order slope {slope:.3}");
                    }
                }
                println!();
            }
        }
    }
    println!("effective step size at lr 1: {:.6e}", effective_step_size(&model, 1.0));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out).map(|()| true),
        Command::Suite { grid, out } => cmd_suite(&grid, out),
        Command::Check => Ok(cmd_check()),
        Command::Diagnose { checkpoint } => cmd_diagnose(&checkpoint).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
