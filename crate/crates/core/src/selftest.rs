//! Fast in-binary checks of the numerical core, used by `fedpsa selftest`.
//!
//! These are a subset of the test suite that runs in a few seconds against
//! the compiled release binary, so a deployed build can be sanity-checked
//! without a source checkout.

use rand::Rng;

use crate::config::{Config, DatasetConfig, StrategyKind};
use crate::data::{CalibrationBatch, CalibrationSource};
use crate::error::Result;
use crate::model::{forward_loss, gradient, init_params, Batch, ModelSpec};
use crate::output::{curve_csv, events_jsonl};
use crate::seeds;
use crate::sensitivity::{cosine, jl_quality_probe, sensitivity_exact, sensitivity_second_order, ProjectionMatrix, UnlabeledLoss};
use crate::sim::{prepare, simulate};
use crate::strategy::{current_temperature, softmax_weights, ThermometerQueue};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Central finite differences against the analytic gradient on a linear model.
fn gradient_check() -> Result<(bool, String)> {
    let spec = ModelSpec::linear(6, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let params = init_params(&spec, seed);
        let mut rng = seeds::rng(seed + 100);
        let inputs = (0..8 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..8).map(|_| rng.random_range(0..4)).collect();
        let batch = Batch::new(inputs, 6, Some(labels))?;
        let g = gradient(&spec, &params, &batch.view())?;
        let h = 1e-5;
        for i in 0..params.dim() {
            let mut p = params.clone();
            p[i] += h;
            let up = forward_loss(&spec, &p, &batch.view())?;
            p[i] -= 2.0 * h;
            let down = forward_loss(&spec, &p, &batch.view())?;
            worst = worst.max(((up - down) / (2.0 * h) - g[i]).abs());
        }
    }
    Ok((worst <= 1e-5, format!("max abs error {worst:.3e}")))
}

/// On labeled data the second-order estimate tracks the exact loss change
/// for small weights.
fn sensitivity_check() -> Result<(bool, String)> {
    let spec = ModelSpec::linear(3, 2);
    let mut params = init_params(&spec, 7);
    params.scale(0.01);
    let mut rng = seeds::rng(11);
    let inputs = (0..32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..32).map(|_| rng.random_range(0..2)).collect();
    let calib = CalibrationBatch {
        source: CalibrationSource::Real,
        seed: 11,
        batch: Batch::new(inputs, 3, Some(labels))?,
    };
    let approx = sensitivity_second_order(&spec, &params, &calib, UnlabeledLoss::SelfLabel)?;
    let indices: Vec<usize> = (0..params.dim()).collect();
    let exact = sensitivity_exact(&spec, &params, &calib, UnlabeledLoss::SelfLabel, &indices)?;
    let worst = approx
        .as_slice()
        .iter()
        .zip(&exact)
        .map(|(a, e)| (a - e).abs())
        .fold(0.0, f64::max);
    let scale = exact.iter().cloned().fold(0.0, f64::max);
    let relative = worst / scale;
    Ok((relative < 0.05, format!("max error {relative:.3e} relative to largest sensitivity")))
}

fn temperature_check() -> Result<(bool, String)> {
    let mut q = ThermometerQueue::new(3, 5.0, 0.5)?;
    for _ in 0..3 {
        q.push(2.0);
    }
    let t0 = current_temperature(&q);
    let mut decreasing = true;
    let mut last = t0.unwrap_or(f64::NAN);
    for m in [1.5, 1.0, 0.5, 0.25] {
        q.push(m);
        let t = current_temperature(&q).unwrap_or(f64::NAN);
        decreasing &= t < last;
        last = t;
    }
    Ok((
        t0 == Some(5.5) && decreasing,
        format!("temperature at M0 = {t0:?}, strictly decreasing = {decreasing}"),
    ))
}

fn softmax_check() -> Result<(bool, String)> {
    let w = softmax_weights(&[0.9, 0.1, -0.5, 1.0], 0.5)?;
    let sum: f64 = w.iter().sum();
    let ordered = w[3] > w[0] && w[0] > w[1] && w[1] > w[2];
    let extreme = softmax_weights(&[1.0, -1.0], 1e-6)?;
    Ok((
        (sum - 1.0).abs() < 1e-12 && ordered && extreme.iter().all(|x| x.is_finite()),
        format!("sum {sum}, ordered {ordered}"),
    ))
}

fn jl_check() -> Result<(bool, String)> {
    let d = 2000;
    let mut rng = seeds::rng(5);
    let vectors: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let proj = ProjectionMatrix::gaussian(3, 256, d)?;
    let report = jl_quality_probe(&proj, &vectors)?;
    let self_cos = cosine(&vectors[0], &vectors[0])?;
    Ok((
        report.max_cosine_error < 0.25 && (self_cos - 1.0).abs() < 1e-12,
        format!("max cosine error {:.4}", report.max_cosine_error),
    ))
}

fn smoke_config(strategy: StrategyKind) -> Config {
    Config {
        strategy,
        n_clients: 10,
        horizon_days: 0.05,
        eval_every: 864,
        dataset: DatasetConfig::Synthetic {
            classes: 3,
            in_dim: 5,
            per_class: 40,
        },
        ..Config::default()
    }
}

/// FedPSA without the thermometer must follow the FedBuff trajectory exactly.
fn fedbuff_equivalence_check() -> Result<(bool, String)> {
    let buff = smoke_config(StrategyKind::FedBuff);
    let mut psa = smoke_config(StrategyKind::FedPsa);
    psa.thermometer = false;
    let a = simulate(&buff, &prepare(&buff, None)?)?.record;
    let b = simulate(&psa, &prepare(&psa, None)?)?.record;
    let same = a.final_params.as_slice() == b.final_params.as_slice() && curve_csv(&a) == curve_csv(&b);
    Ok((same, format!("{} aggregations compared", a.events.len())))
}

fn determinism_check() -> Result<(bool, String)> {
    let config = smoke_config(StrategyKind::FedPsa);
    let env = prepare(&config, None)?;
    let a = simulate(&config, &env)?.record;
    let b = simulate(&config, &prepare(&config, None)?)?.record;
    let same = curve_csv(&a) == curve_csv(&b) && events_jsonl(&a) == events_jsonl(&b);
    Ok((same, format!("{} curve points, {} events", a.curve.len(), a.events.len())))
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("gradient matches finite differences", gradient_check()),
        check("second-order sensitivity tracks exact loss change", sensitivity_check()),
        check("temperature arithmetic", temperature_check()),
        check("softmax weights", softmax_check()),
        check("random projection preserves cosines", jl_check()),
        check("fedpsa without thermometer equals fedbuff", fedbuff_equivalence_check()),
        check("runs are deterministic", determinism_check()),
    ]
}
