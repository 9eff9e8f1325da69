//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The MNIST criterion reads the raw IDX files from `$SSPROP_MNIST_DIR`,
//! defaulting to `<workspace>/data/mnist`.

mod oracles;
mod synthetic;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssprop_cli::train::METRICS_FILE;
use ssprop_cli::{flops_report, train, ExperimentConfig, TrainOutcome};
use ssprop_core::flops::{
    batchnorm_backward_flops, conv_backward_flops_dense, conv_backward_flops_sparse,
    drop_rate_lower_bound, dropout_backward_flops,
};
use ssprop_core::gradcheck::{conv_cases, ConvCase};
use ssprop_core::{
    conv_backward_dense, conv_forward, sparse_conv_backward, SparsifyPolicy, Tensor4,
};

use oracles::*;

const GRAD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const FORWARD_TOL: f64 = 1e-10;
const MASK_TOL: f64 = 1e-12;
const PROPERTY_BUDGET: Duration = Duration::from_secs(60);
const RUN_RATIO: f64 = 0.60;
const RUN_RATIO_TOL: f64 = 0.02;
const DENSE_ACC_FLOOR: f64 = 0.97;
const ACC_GAP: f64 = 0.01;

type Check = (bool, String);

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn geometries() -> Vec<ConvCase> {
    conv_cases(2024, 2)
}

fn random_like(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn coverage(cases: &[ConvCase]) -> Result<()> {
    for (what, want, got) in [
        (
            "K",
            vec![1, 2, 3],
            cases.iter().map(|c| c.geometry.kernel).collect::<Vec<_>>(),
        ),
        (
            "s",
            vec![1, 2],
            cases.iter().map(|c| c.geometry.stride).collect(),
        ),
        (
            "p",
            vec![0, 1],
            cases.iter().map(|c| c.geometry.padding).collect(),
        ),
    ] {
        if let Some(v) = want.iter().find(|v| !got.contains(v)) {
            bail!("no geometry with {what} = {v}");
        }
    }
    if cases.len() < 20 {
        bail!("only {} geometries", cases.len());
    }
    Ok(())
}

fn gradient_correctness() -> Result<Check> {
    let start = Instant::now();
    let cases = geometries();
    coverage(&cases)?;
    let mut worst = 0.0f64;
    for (n, case) in cases.iter().enumerate() {
        let layer = case.layer::<f64>()?;
        let x = case.input_tensor::<f64>()?;
        let gy = random_like(layer.output_dims(x.dims())?, n as u64);
        let g = conv_backward_dense(&layer, &x, &gy)?;
        let analytic = [g.grad_input.data(), g.grad_weights.data(), &g.grad_bias].concat();
        let numeric = central_differences(&layer, &x, gy.data(), FD_STEP);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let t = start.elapsed();
    Ok((
        worst <= GRAD_TOL && t < PROPERTY_BUDGET,
        format!(
            "worst relative error {worst:.2e} over {} geometries (tol {GRAD_TOL:.0e}, {t:.1?})",
            cases.len()
        ),
    ))
}

fn columnized_equivalence() -> Result<Check> {
    let start = Instant::now();
    let cases = geometries();
    let mut worst = 0.0f64;
    for case in &cases {
        let layer = case.layer::<f64>()?;
        let x = case.input_tensor::<f64>()?;
        let (naive, dims) = naive_forward(&layer, &x);
        let y = conv_forward(&layer, &x)?;
        if y.dims() != dims {
            bail!("{case:?}: dims {:?} vs {dims:?}", y.dims());
        }
        worst = y
            .data()
            .iter()
            .zip(&naive)
            .fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    let t = start.elapsed();
    Ok((
        worst <= FORWARD_TOL && t < PROPERTY_BUDGET,
        format!(
            "max abs difference {worst:.2e} over {} geometries (tol {FORWARD_TOL:.0e}, {t:.1?})",
            cases.len()
        ),
    ))
}

fn masked_oracle() -> Result<Check> {
    let start = Instant::now();
    let cases = geometries();
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for (n, case) in cases.iter().enumerate() {
        let mut case = *case;
        case.out_channels = 5;
        let layer = case.layer::<f64>()?;
        let x = case.input_tensor::<f64>()?;
        let gy = random_like(layer.output_dims(x.dims())?, 100 + n as u64);
        let dense = conv_backward_dense(&layer, &x, &gy)?;
        let (zero, _) = sparse_conv_backward(&layer, &x, &gy, &SparsifyPolicy::channel(0.0)?)?;
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        bitwise &= bits(zero.grad_input.data()) == bits(dense.grad_input.data())
            && bits(zero.grad_weights.data()) == bits(dense.grad_weights.data())
            && bits(&zero.grad_bias) == bits(&dense.grad_bias);
        for d in [0.25, 0.5, 0.8] {
            let kept = top_channels(&gy, d);
            let (sparse, mask) =
                sparse_conv_backward(&layer, &x, &gy, &SparsifyPolicy::channel(d)?)?;
            if mask.retained() != kept.as_slice() {
                bail!(
                    "{case:?} D={d}: kept {:?}, expected {kept:?}",
                    mask.retained()
                );
            }
            let oracle = conv_backward_dense(&layer, &x, &zero_other_channels(&gy, &kept))?;
            for (a, b) in [
                (sparse.grad_input.data(), oracle.grad_input.data()),
                (sparse.grad_weights.data(), oracle.grad_weights.data()),
                (&sparse.grad_bias[..], &oracle.grad_bias[..]),
            ] {
                worst = a
                    .iter()
                    .zip(b)
                    .fold(worst, |m, (p, q)| m.max((p - q).abs()));
            }
        }
    }
    let t = start.elapsed();
    Ok((
        worst <= MASK_TOL && bitwise && t < PROPERTY_BUDGET,
        format!(
            "max abs difference {worst:.2e} at D in {{0.25, 0.5, 0.8}} (tol {MASK_TOL:.0e}); D=0 bitwise {}; {t:.1?}",
            if bitwise { "identical" } else { "DIFFERENT" }
        ),
    ))
}

fn flops_fidelity() -> Result<Check> {
    let mut notes = Vec::new();
    let mut ok = true;
    let cases: Vec<_> = geometries().into_iter().step_by(5).take(5).collect();
    for case in &cases {
        let layer = case.layer::<f64>()?;
        let x = case.input_tensor::<f64>()?;
        let out = layer.output_dims(x.dims())?;
        let gy = random_like(out, 7);
        let ops = Counter::new();
        let (gi, gw, gb) = counted_backward(&layer, &x, &gy, &ops);
        let g = conv_backward_dense(&layer, &x, &gy)?;
        let formula = conv_backward_flops_dense(
            out[0],
            out[2],
            out[3],
            x.dims()[1],
            out[1],
            case.geometry.kernel,
        );
        let same_grads = relative_error(
            &[gi, gw, gb].concat(),
            &[g.grad_input.data(), g.grad_weights.data(), &g.grad_bias].concat(),
        ) < 1e-12;
        ok &= ops.count() == formula && same_grads;
    }
    notes.push(format!(
        "counted = formula on {} geometries: {ok}",
        cases.len()
    ));
    let bn = batchnorm_backward_flops(2, 2, 2, 3);
    let dropout = dropout_backward_flops(2, 2, 2, 3);
    ok &= bn == 318 && dropout == 48;
    notes.push(format!("batch norm {bn} (318), dropout {dropout} (48)"));
    let bound = drop_rate_lower_bound(1, 3);
    ok &= (bound - 1.0 / 37.0).abs() < 1e-15 && (bound - 0.027).abs() < 5e-4;
    notes.push(format!("bound {bound:.6}"));
    let mut flips = true;
    for (c_in, k) in [(1, 3), (3, 3), (16, 3), (2, 1)] {
        let bound = drop_rate_lower_bound(c_in, k);
        let dense = conv_backward_flops_dense(128, 28, 28, c_in, 64, k);
        flips &= conv_backward_flops_sparse(128, 28, 28, c_in, 64, k, bound * (1.0 + 1e-3)) < dense
            && conv_backward_flops_sparse(128, 28, 28, c_in, 64, k, bound * (1.0 - 1e-3)) > dense;
    }
    ok &= flips;
    notes.push(format!("sign change at bound: {flips}"));
    Ok((ok, notes.join("; ")))
}

fn run_ratio(config: &Path) -> Result<Check> {
    let start = Instant::now();
    let cfg = ExperimentConfig::load(config, false)?;
    let report = flops_report(&cfg)?;
    let ratio = report.run.ratio();
    Ok((
        (ratio - RUN_RATIO).abs() <= RUN_RATIO_TOL,
        format!(
            "{}: ratio {ratio:.4} (target {RUN_RATIO} ± {RUN_RATIO_TOL}), average drop rate {:.4}, {:.1?}",
            config.file_name().unwrap().to_string_lossy(),
            report.run.average_drop_rate,
            start.elapsed()
        ),
    ))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("SSPROP_MNIST_DIR")
        .map_or_else(|| workspace().join("data/mnist"), PathBuf::from)
}

fn mnist_run(name: &str, out: &Path) -> Result<(ExperimentConfig, TrainOutcome)> {
    let mut cfg = ExperimentConfig::load(&workspace().join("configs").join(name), false)?;
    cfg.dataset.root = mnist_dir();
    cfg.output_dir = out.join(name.trim_end_matches(".toml"));
    cfg.validate(true)?;
    let start = Instant::now();
    let outcome = train(&cfg).with_context(|| format!("training {name}"))?;
    eprintln!("{name}: {:.1?}", start.elapsed());
    Ok((cfg, outcome))
}

fn determinism() -> Result<Check> {
    let dir = tempfile::tempdir()?;
    synthetic::write_mnist(&dir.path().join("data"), 400, 100);
    let text = synthetic::config_text(
        &dir.path().join("data"),
        &dir.path().join("out"),
        3,
        "[sparsify]\ndrop_rate = 0.8\nscheduler = \"bar-periodic\"\nperiod = \"two-epochs\"\n",
    );
    let cfg = ExperimentConfig::load(&synthetic::write_config(dir.path(), "c.toml", &text), true)?;
    train(&cfg)?;
    let first = std::fs::read(cfg.output_dir.join(METRICS_FILE))?;
    train(&cfg)?;
    let second = std::fs::read(cfg.output_dir.join(METRICS_FILE))?;
    Ok((
        first == second,
        format!(
            "two runs, {} bytes of metrics.csv, identical: {}",
            first.len(),
            first == second
        ),
    ))
}

fn report(id: &str, title: &str, result: Result<Check>) -> bool {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    println!(
        "[{}] {id} {title}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() -> ExitCode {
    let mut pass = true;
    pass &= report("1", "gradient correctness", gradient_correctness());
    pass &= report("2", "columnized vs naive forward", columnized_equivalence());
    pass &= report("3", "masked-oracle equivalence", masked_oracle());
    pass &= report("4", "FLOPs formula fidelity", flops_fidelity());
    let conv_config = workspace().join("configs/flops-conv.toml");
    pass &= report("5", "schedule-averaged savings", run_ratio(&conv_config));

    let dir = mnist_dir();
    if dir.join("train-images-idx3-ubyte").is_file() {
        let out = tempfile::tempdir().expect("tempdir");
        let runs = mnist_run("mnist-dense.toml", out.path())
            .and_then(|dense| Ok((dense, mnist_run("mnist-ssprop.toml", out.path())?)));
        match runs {
            Ok(((_, dense), (sparse_cfg, sparse))) => {
                let (d, s) = (dense.summary.final_test_acc, sparse.summary.final_test_acc);
                pass &= report(
                    "6a",
                    "MNIST dense accuracy",
                    Ok((
                        d >= DENSE_ACC_FLOOR,
                        format!("{:.2}% (floor {:.1}%)", 100.0 * d, 100.0 * DENSE_ACC_FLOOR),
                    )),
                );
                pass &= report(
                    "6b",
                    "MNIST ssProp accuracy",
                    Ok((
                        (s - d).abs() <= ACC_GAP,
                        format!(
                            "{:.2}%, {:+.2} points from dense (limit {:.1})",
                            100.0 * s,
                            100.0 * (s - d),
                            100.0 * ACC_GAP
                        ),
                    )),
                );
                let logged = sparse.summary.conv_flops_ratio;
                pass &= report(
                    "6c",
                    "logged conv FLOPs match the analytic report",
                    flops_report(&sparse_cfg).map(|r| {
                        let analytic = r.run.conv_ratio();
                        (
                            sparse.summary.conv_backward_flops_actual == r.run.conv_actual
                                && sparse.summary.conv_backward_flops_dense == r.run.conv_dense,
                            format!("logged {logged:.4}, analytic {analytic:.4}"),
                        )
                    }),
                );
                pass &= report(
                    "6d",
                    "logged conv FLOPs ratio within the schedule-averaged target",
                    Ok((
                        (logged - RUN_RATIO).abs() <= RUN_RATIO_TOL,
                        format!("{logged:.4} over 3 epochs (target {RUN_RATIO} ± {RUN_RATIO_TOL})"),
                    )),
                );
            }
            Err(e) => pass &= report("6", "desk-scale MNIST training", Err(e)),
        }
    } else {
        pass &= report(
            "6",
            "desk-scale MNIST training",
            Err(anyhow::anyhow!(
                "no MNIST IDX files in {}; set SSPROP_MNIST_DIR",
                dir.display()
            )),
        );
    }
    pass &= report("7", "determinism", determinism());
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
