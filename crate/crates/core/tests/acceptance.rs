//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-8 are correctness properties and decide the exit status.
//! Criteria 9-14 are desk-scale quantitative reproductions whose outcome is
//! reported but does not fail the build.
//!
//! Runs every criterion by default; pass criterion numbers to run a subset,
//! e.g. `cargo test --test acceptance -- 4 7`. The Fashion-MNIST criterion
//! reads IDX files from `$FEDPSA_DATA_DIR/fmnist` and reports SKIP when they
//! are absent.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use fedpsa::config::{data_root, locate_idx_pair, Config, DatasetConfig, LatencyKind, ModelConfig, StrategyKind};
use fedpsa::data::{CalibrationBatch, CalibrationSource};
use fedpsa::metrics::{binned_correlation, RunRecord};
use fedpsa::model::{forward_loss, gradient, init_params, Architecture, Batch, ModelSpec};
use fedpsa::output::{write_run, CURVE_FILE, EVENTS_FILE};
use fedpsa::seeds;
use fedpsa::sensitivity::{cosine, sensitivity_second_order, ProjectionMatrix, UnlabeledLoss};
use fedpsa::sim::{concurrency_cap, prepare, simulate, SimOutput, TraceKind};
use fedpsa::strategy::{current_temperature, ThermometerQueue};
use fedpsa::ParamVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// Synthetic 10-class task with a small MLP, used by the quantitative criteria.
fn synthetic(strategy: StrategyKind, alpha: f64, seed: u64) -> Config {
    Config {
        strategy,
        alpha,
        seed,
        model: ModelConfig::Mlp { hidden: 16 },
        dataset: DatasetConfig::Synthetic {
            classes: 10,
            in_dim: 20,
            per_class: 500,
        },
        ..Config::default()
    }
}

/// Small, fast configuration for the behavioral criteria.
fn smoke(strategy: StrategyKind) -> Config {
    Config {
        strategy,
        n_clients: 10,
        horizon_days: 0.5,
        eval_every: 4_320,
        dataset: DatasetConfig::Synthetic {
            classes: 4,
            in_dim: 8,
            per_class: 60,
        },
        ..Config::default()
    }
}

/// Runs configurations once each, keyed by their content hash.
#[derive(Default)]
struct Runs {
    cache: HashMap<String, RunRecord>,
}

impl Runs {
    fn get(&mut self, config: &Config) -> Result<&RunRecord, Box<dyn std::error::Error>> {
        let key = config.hash();
        if !self.cache.contains_key(&key) {
            let env = prepare(config, None)?;
            let record = simulate(config, &env)?.record;
            self.cache.insert(key.clone(), record);
        }
        Ok(&self.cache[&key])
    }

    fn mean_accuracy(&mut self, configs: &[Config]) -> Result<f64, Box<dyn std::error::Error>> {
        let mut total = 0.0;
        for c in configs {
            total += self.get(c)?.final_accuracy().ok_or("empty curve")?;
        }
        Ok(total / configs.len() as f64)
    }
}

/// Criteria up to this number gate the exit status.
const GATING: usize = 8;

const SEEDS: [u64; 3] = [0, 1, 2];

fn over_seeds(f: impl Fn(u64) -> Config) -> Vec<Config> {
    SEEDS.iter().map(|&s| f(s)).collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

fn random_batch(in_dim: usize, n: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = seeds::rng(seed);
    let inputs = (0..n * in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, in_dim, Some(labels)).unwrap()
}

/// True when some hidden pre-activation is within `margin` of the ReLU kink,
/// where central differences are not a valid oracle.
fn near_kink(spec: &ModelSpec, p: &ParamVector, b: &Batch, margin: f64) -> bool {
    let Architecture::Mlp { hidden, .. } = spec.architecture else {
        return false;
    };
    let in_dim = spec.in_dim();
    (0..b.len()).any(|s| {
        let x = &b.inputs()[s * in_dim..(s + 1) * in_dim];
        (0..hidden).any(|j| {
            let z = p[hidden * in_dim + j] + (0..in_dim).map(|i| p[j * in_dim + i] * x[i]).sum::<f64>();
            z.abs() < margin
        })
    })
}

fn criterion_gradient(_: &mut Runs) -> Outcome {
    let h = 1e-4;
    let mut lines = Vec::new();
    let mut ok = true;
    for spec in [ModelSpec::linear(20, 10), ModelSpec::mlp(20, 16, 10)] {
        let mut worst: f64 = 0.0;
        let mut fixtures = 0;
        let mut seed = 0;
        while fixtures < 20 && seed < 1_000 {
            let params = init_params(&spec, seed);
            let batch = random_batch(spec.in_dim(), 8, spec.n_classes(), seed + 10_000);
            seed += 1;
            if near_kink(&spec, &params, &batch, 1e-3) {
                continue;
            }
            fixtures += 1;
            let g = gradient(&spec, &params, &batch.view())?;
            let mut rng = seeds::rng(seed + 20_000);
            for _ in 0..50 {
                let i = rng.random_range(0..params.dim());
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let fd = (forward_loss(&spec, &plus, &batch.view())? - forward_loss(&spec, &minus, &batch.view())?)
                    / (2.0 * h);
                worst = worst.max((g[i] - fd).abs());
            }
        }
        ok &= fixtures == 20 && worst <= 1e-5;
        lines.push(format!("{:?}: max err {worst:.2e} over {fixtures} fixtures x 50 coords", spec.architecture));
    }
    Ok((ok, lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 2. Sensitivity formula oracle
// ---------------------------------------------------------------------------

/// `|g_i t_i - 0.5 F_ii t_i^2|` for a linear softmax model, one parameter at a time.
fn scalar_sensitivity(p: &[f64], in_dim: usize, classes: usize, x: &[f64], y: &[usize]) -> Vec<f64> {
    let n = y.len();
    let d = classes * in_dim + classes;
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let (mut g, mut f) = (0.0, 0.0);
        for s in 0..n {
            let row = &x[s * in_dim..(s + 1) * in_dim];
            let logits: Vec<f64> = (0..classes)
                .map(|c| p[classes * in_dim + c] + (0..in_dim).map(|j| p[c * in_dim + j] * row[j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let err = |c: usize| (logits[c] - m).exp() / z - if c == y[s] { 1.0 } else { 0.0 };
            let gi = if i < classes * in_dim {
                err(i / in_dim) * row[i % in_dim]
            } else {
                err(i - classes * in_dim)
            };
            g += gi;
            f += gi * gi;
        }
        g /= n as f64;
        f /= n as f64;
        *o = (g * p[i] - 0.5 * f * p[i] * p[i]).abs();
    }
    out
}

fn criterion_sensitivity(_: &mut Runs) -> Outcome {
    let spec = ModelSpec::linear(4, 2);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let params = init_params(&spec, seed);
        let mut rng = seeds::rng(seed + 77);
        let x: Vec<f64> = (0..16 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..16).map(|_| rng.random_range(0..2)).collect();
        let calib = CalibrationBatch {
            source: CalibrationSource::Real,
            seed,
            batch: Batch::new(x.clone(), 4, Some(y.clone()))?,
        };
        let got = sensitivity_second_order(&spec, &params, &calib, UnlabeledLoss::SelfLabel)?;
        let want = scalar_sensitivity(&params, 4, 2, &x, &y);
        for (g, w) in got.as_slice().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    Ok((
        spec.param_count() == 10 && worst <= 1e-10,
        format!("{} parameters, max abs err {worst:.2e} over 10 fixtures", spec.param_count()),
    ))
}

// ---------------------------------------------------------------------------
// 3. JL sketch fidelity
// ---------------------------------------------------------------------------

fn unit_vectors(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeds::rng(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Pairwise `|cos(Rx, Ry) - cos(x, y)|` over all pairs.
fn cosine_errors(proj: &ProjectionMatrix, vectors: &[Vec<f64>]) -> Result<Vec<f64>, Box<dyn std::error::Error>> {
    let sketches = vectors.iter().map(|v| proj.apply(v)).collect::<Result<Vec<_>, _>>()?;
    let mut errors = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let full = cosine(&vectors[i], &vectors[j])?;
            let sk = cosine(&sketches[i], &sketches[j])?;
            errors.push((sk - full).abs());
        }
    }
    Ok(errors)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_jl(_: &mut Runs) -> Outcome {
    let d = 10_000;
    let vectors = unit_vectors(d, 50, 3);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let errors = cosine_errors(&ProjectionMatrix::gaussian(seed, 256, d)?, &vectors)?;
        worst = errors.into_iter().fold(worst, f64::max);
    }
    let small = median(cosine_errors(&ProjectionMatrix::gaussian(11, 16, d)?, &vectors)?);
    let large = median(cosine_errors(&ProjectionMatrix::gaussian(11, 1024, d)?, &vectors)?);
    Ok((
        worst < 0.25 && large <= small,
        format!("k=256 max err {worst:.4} (5 seeds); median err k=16 {small:.4}, k=1024 {large:.4}"),
    ))
}

// ---------------------------------------------------------------------------
// 4. Branch fidelity, verified from events.jsonl
// ---------------------------------------------------------------------------

fn softmax(kappas: &[f64], temp: f64) -> Vec<f64> {
    let max = kappas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = kappas.iter().map(|k| ((k - max) / temp).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().map(|a| a.iter().filter_map(Value::as_f64).collect()).unwrap_or_default()
}

fn criterion_branches(_: &mut Runs) -> Outcome {
    let mut config = smoke(StrategyKind::FedPsa);
    config.n_clients = 20;
    config.queue_size = 23;
    config.seed = 4;
    let env = prepare(&config, None)?;
    let SimOutput { record, trace } = simulate(&config, &env)?;
    let dir = tempfile::tempdir()?;
    write_run(dir.path(), &config, &record)?;
    let text = std::fs::read_to_string(dir.path().join(EVENTS_FILE))?;
    let events: Vec<Value> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;

    let (ls, lq) = (config.buffer_size, config.queue_size);
    let (mut uploads, mut uniform, mut tempered) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    for e in &events {
        let weights = floats(&e["weights"]);
        let kappas = floats(&e["kappas"]);
        uploads += weights.len();
        if weights.len() != ls || kappas.len() != ls {
            problems.push(format!("version {} aggregated {} updates", e["version"], weights.len()));
        }
        if uploads < lq {
            uniform += 1;
            if !e["temperature"].is_null() || weights.iter().any(|&w| w != 1.0 / ls as f64) {
                problems.push(format!("version {} not uniform before first fill", e["version"]));
            }
        } else {
            tempered += 1;
            let (Some(t), Some(mean), Some(m0)) =
                (e["temperature"].as_f64(), e["queue_mean"].as_f64(), e["queue_m0"].as_f64())
            else {
                problems.push(format!("version {} missing thermometer state", e["version"]));
                continue;
            };
            let expect_t = (mean / m0) * config.gamma + config.delta;
            if (t - expect_t).abs() > 1e-12 * expect_t {
                problems.push(format!("version {}: temp {t} vs {expect_t}", e["version"]));
            }
            for (w, s) in weights.iter().zip(softmax(&kappas, expect_t)) {
                worst = worst.max((w - s).abs());
            }
        }
    }
    // Between consecutive aggregations exactly L_s uploads arrive.
    let mut pending = 0;
    for t in &trace {
        match t.kind {
            TraceKind::Upload => pending += 1,
            TraceKind::Aggregate => {
                if pending != ls {
                    problems.push(format!("aggregation at {} after {pending} uploads", t.time));
                }
                pending = 0;
            }
            _ => {}
        }
    }
    if pending >= ls {
        problems.push(format!("{pending} uploads left in the buffer"));
    }
    let ok = problems.is_empty() && uniform > 0 && tempered > 0 && worst <= 1e-12;
    Ok((
        ok,
        format!(
            "{} aggregations ({uniform} uniform, {tempered} tempered), softmax max err {worst:.1e}{}",
            events.len(),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 5. FedBuff equivalence
// ---------------------------------------------------------------------------

fn criterion_fedbuff_equivalence(_: &mut Runs) -> Outcome {
    let buff = smoke(StrategyKind::FedBuff);
    let mut psa = smoke(StrategyKind::FedPsa);
    psa.thermometer = false;
    let a = simulate(&buff, &prepare(&buff, None)?)?.record;
    let b = simulate(&psa, &prepare(&psa, None)?)?.record;
    let bits = |p: &ParamVector| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let schedule = |r: &RunRecord| {
        r.events
            .iter()
            .map(|e| (e.virtual_time, e.client_ids.clone(), e.staleness_taus.clone(), e.weights.clone()))
            .collect::<Vec<_>>()
    };
    let same_params = bits(&a.final_params) == bits(&b.final_params);
    let same_schedule = schedule(&a) == schedule(&b);
    let same_curve = a.curve == b.curve;
    Ok((
        same_params && same_schedule && same_curve && !a.events.is_empty(),
        format!(
            "{} aggregations; params identical: {same_params}, schedule identical: {same_schedule}, curve identical: {same_curve}",
            a.events.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6. Temperature arithmetic
// ---------------------------------------------------------------------------

fn criterion_temperature(_: &mut Runs) -> Outcome {
    let mut q = ThermometerQueue::new(50, 5.0, 0.5)?;
    for _ in 0..50 {
        q.push(2.0);
    }
    let at_m0 = current_temperature(&q).ok_or("queue not filled")?;
    let mut m = 2.0;
    let mut last = at_m0;
    let mut decreasing = true;
    for _ in 0..500 {
        m *= 0.97;
        q.push(m);
        let t = current_temperature(&q).ok_or("queue not filled")?;
        decreasing &= t < last;
        last = t;
    }
    Ok((
        at_m0 == 5.5 && decreasing,
        format!("Temp at M0 = {at_m0}; strictly decreasing over 500 steps: {decreasing} (final {last:.4})"),
    ))
}

// ---------------------------------------------------------------------------
// 7. Determinism
// ---------------------------------------------------------------------------

fn criterion_determinism(_: &mut Runs) -> Outcome {
    let mut mismatches = Vec::new();
    let mut count = 0;
    for strategy in [
        StrategyKind::FedPsa,
        StrategyKind::FedBuff,
        StrategyKind::FedAsync,
        StrategyKind::FedAvg,
    ] {
        for kind in [LatencyKind::Uniform, LatencyKind::LongTail] {
            let mut config = smoke(strategy);
            config.latency.kind = kind;
            config.seed = 17;
            let files = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), Box<dyn std::error::Error>> {
                let env = prepare(&config, None)?;
                write_run(dir, &config, &simulate(&config, &env)?.record)?;
                Ok((std::fs::read(dir.join(CURVE_FILE))?, std::fs::read(dir.join(EVENTS_FILE))?))
            };
            let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
            if files(a.path())? != files(b.path())? {
                mismatches.push(format!("{strategy:?}/{kind:?}"));
            }
            count += 1;
        }
    }
    Ok((
        mismatches.is_empty(),
        format!("{count} configs executed twice; byte mismatches: {mismatches:?}"),
    ))
}

// ---------------------------------------------------------------------------
// 8. Causality and the concurrency cap
// ---------------------------------------------------------------------------

fn criterion_causality(_: &mut Runs) -> Outcome {
    let mut problems = Vec::new();
    let (mut stale, mut total) = (0u64, 0u64);
    for seed in 0..10u64 {
        let mut config = Config {
            seed,
            horizon_days: 0.2,
            eval_every: 1_728,
            ..Config::default()
        };
        match seed % 3 {
            0 => (config.latency.lo, config.latency.hi) = (10, 500),
            1 => (config.latency.lo, config.latency.hi) = (50, 2_500),
            _ => config.latency.kind = LatencyKind::LongTail,
        }
        let cap = concurrency_cap(config.n_clients, config.concurrency_rate);
        // The simulator asserts causality internally and errors on violation.
        let out = simulate(&config, &prepare(&config, None)?)?;
        if out.record.diagnostics.max_concurrent > cap {
            problems.push(format!("seed {seed}: {} concurrent > cap {cap}", out.record.diagnostics.max_concurrent));
        }
        let mut busy = vec![false; config.n_clients];
        let mut prev_time = 0;
        for t in &out.trace {
            if t.time < prev_time {
                problems.push(format!("seed {seed}: time went back at {}", t.time));
            }
            prev_time = t.time;
            match (t.kind, t.client) {
                (TraceKind::Admit, Some(c)) if busy[c] => problems.push(format!("seed {seed}: client {c} admitted twice")),
                (TraceKind::Admit, Some(c)) => busy[c] = true,
                (TraceKind::Upload, Some(c)) if !busy[c] => problems.push(format!("seed {seed}: client {c} uploaded idle")),
                (TraceKind::Upload, Some(c)) => busy[c] = false,
                _ => {}
            }
            if busy.iter().filter(|b| **b).count() > cap {
                problems.push(format!("seed {seed}: cap exceeded at {}", t.time));
            }
        }
        let hist = &out.record.diagnostics.staleness_histogram;
        total += hist.iter().sum::<u64>();
        stale += hist.iter().skip(1).sum::<u64>();
    }
    problems.truncate(5);
    Ok((
        problems.is_empty() && stale > 0,
        format!(
            "10 seeds x 3 latency models; tau>=1 mass {} of {total} uploads{}",
            pct(stale as f64 / total.max(1) as f64),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. Fashion-MNIST linear model
// ---------------------------------------------------------------------------

fn criterion_fmnist(runs: &mut Runs) -> Result<Option<(bool, String)>, Box<dyn std::error::Error>> {
    if locate_idx_pair(&data_root().join("fmnist")).is_err() {
        return Ok(None);
    }
    let config = |strategy| Config {
        strategy,
        dataset: DatasetConfig::Fmnist,
        ..Config::default()
    };
    let t0 = Instant::now();
    let psa = runs.get(&config(StrategyKind::FedPsa))?.final_accuracy().ok_or("empty curve")?;
    let per_run = t0.elapsed().as_secs_f64() / 60.0;
    let buff = runs.get(&config(StrategyKind::FedBuff))?.final_accuracy().ok_or("empty curve")?;
    Ok(Some((
        (0.80..=0.86).contains(&psa) && psa >= buff - 0.005,
        format!(
            "FedPSA {} (target 80-86%), FedBuff {}, gap {}; {per_run:.1} min per run",
            pct(psa),
            pct(buff),
            pct(psa - buff)
        ),
    )))
}

// ---------------------------------------------------------------------------
// 10-14. Synthetic quantitative patterns
// ---------------------------------------------------------------------------

fn criterion_heterogeneity(runs: &mut Runs) -> Outcome {
    let mut accs = Vec::new();
    for alpha in [1.0, 0.5, 0.1] {
        accs.push(runs.mean_accuracy(&over_seeds(|s| synthetic(StrategyKind::FedPsa, alpha, s)))?);
    }
    Ok((
        accs[0] >= accs[1] && accs[1] >= accs[2],
        format!("FedPSA mean final accuracy: alpha=1.0 {}, 0.5 {}, 0.1 {}", pct(accs[0]), pct(accs[1]), pct(accs[2])),
    ))
}

fn criterion_latency_robustness(runs: &mut Runs) -> Outcome {
    let mut drops = Vec::new();
    for strategy in [StrategyKind::FedPsa, StrategyKind::FedBuff] {
        let with_latency = |lo, hi| {
            over_seeds(|s| {
                let mut c = synthetic(strategy, 1.0, s);
                (c.latency.lo, c.latency.hi) = (lo, hi);
                c
            })
        };
        let fast = runs.mean_accuracy(&with_latency(10, 500))?;
        let slow = runs.mean_accuracy(&with_latency(50, 2_500))?;
        drops.push((fast, slow, fast - slow));
    }
    let (psa, buff) = (drops[0], drops[1]);
    Ok((
        psa.2 <= buff.2,
        format!(
            "drop FedPSA {} ({} -> {}), FedBuff {} ({} -> {})",
            pct(psa.2),
            pct(psa.0),
            pct(psa.1),
            pct(buff.2),
            pct(buff.0),
            pct(buff.1)
        ),
    ))
}

fn criterion_alignment(runs: &mut Runs) -> Outcome {
    let mut config = synthetic(StrategyKind::FedPsa, 0.1, 0);
    config.probe.enabled = true;
    let record = runs.get(&config)?;
    let report = binned_correlation(&record.probe, config.probe.bin_width)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "null".into());
    let ok = match (report.pearson_binned, report.pearson_raw) {
        (Some(b), Some(r)) => b > r && b > 0.3,
        _ => false,
    };
    Ok((
        ok,
        format!(
            "{} samples in {} bins; Pearson raw {}, binned {}",
            record.probe.len(),
            report.bins.len(),
            fmt(report.pearson_raw),
            fmt(report.pearson_binned)
        ),
    ))
}

fn criterion_calibration(runs: &mut Runs) -> Outcome {
    let with_source = |source| {
        over_seeds(|s| {
            let mut c = synthetic(StrategyKind::FedPsa, 1.0, s);
            c.calibration.source = source;
            c
        })
    };
    let gaussian = runs.mean_accuracy(&with_source(CalibrationSource::Gaussian))?;
    let real = runs.mean_accuracy(&with_source(CalibrationSource::Real))?;
    Ok((
        (gaussian - real).abs() <= 0.015,
        format!("Gaussian {}, real {}, |diff| {}", pct(gaussian), pct(real), pct((gaussian - real).abs())),
    ))
}

fn criterion_ablation(runs: &mut Runs) -> Outcome {
    let mean = |runs: &mut Runs, strategy| runs.mean_accuracy(&over_seeds(|s| synthetic(strategy, 0.1, s)));
    let full = mean(runs, StrategyKind::FedPsa)?;
    let no_t = mean(runs, StrategyKind::FedPsaNoT)?;
    let no_s = mean(runs, StrategyKind::FedPsaNoS)?;
    Ok((
        full >= no_t && full >= no_s,
        format!("full {}, w/o T {}, w/o S {}", pct(full), pct(no_t), pct(no_s)),
    ))
}

// ---------------------------------------------------------------------------

fn lift(f: fn(&mut Runs) -> Outcome) -> impl Fn(&mut Runs) -> Result<Option<(bool, String)>, Box<dyn std::error::Error>> {
    move |runs| f(runs).map(Some)
}

fn main() -> ExitCode {
    type Check = Box<dyn Fn(&mut Runs) -> Result<Option<(bool, String)>, Box<dyn std::error::Error>>>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "gradient matches central differences", Box::new(lift(criterion_gradient))),
        (2, "sensitivity matches scalar oracle", Box::new(lift(criterion_sensitivity))),
        (3, "sketch preserves cosines", Box::new(lift(criterion_jl))),
        (4, "aggregation branches follow the thermometer", Box::new(lift(criterion_branches))),
        (5, "disabled thermometer reproduces FedBuff", Box::new(lift(criterion_fedbuff_equivalence))),
        (6, "temperature arithmetic", Box::new(lift(criterion_temperature))),
        (7, "byte-identical reruns", Box::new(lift(criterion_determinism))),
        (8, "causality and concurrency cap", Box::new(lift(criterion_causality))),
        (9, "Fashion-MNIST linear accuracy", Box::new(criterion_fmnist)),
        (10, "heterogeneity ordering", Box::new(lift(criterion_heterogeneity))),
        (11, "latency robustness", Box::new(lift(criterion_latency_robustness))),
        (12, "kappa tracks alignment", Box::new(lift(criterion_alignment))),
        (13, "calibration source robustness", Box::new(lift(criterion_calibration))),
        (14, "ablation direction", Box::new(lift(criterion_ablation))),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut runs = Runs::default();
    let mut failed = Vec::new();
    for (n, name, check) in &criteria {
        if !selected.is_empty() && !selected.contains(n) {
            continue;
        }
        let start = Instant::now();
        let (verdict, detail) = match check(&mut runs) {
            Ok(Some((true, d))) => (Verdict::Pass, d),
            Ok(Some((false, d))) => (Verdict::Fail, d),
            Ok(None) => (Verdict::Skip, format!("dataset not found under {}", data_root().display())),
            Err(e) => (Verdict::Fail, format!("error: {e}")),
        };
        let label = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed.push(*n);
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("criterion {n:>2} {label} [{:.1}s] {name}: {detail}", start.elapsed().as_secs_f64());
    }
    let (gating, reported): (Vec<usize>, Vec<usize>) = failed.iter().partition(|&&n| n <= GATING);
    if !reported.is_empty() {
        println!("quantitative criteria failed (reported, not gating): {reported:?}");
    }
    if gating.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("correctness criteria failed: {gating:?}");
        ExitCode::FAILURE
    }
}
