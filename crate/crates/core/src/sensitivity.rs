//! Parameter sensitivity, random-projection sketches and sketch-space cosine.
//!
//! The sensitivity of parameter `i` is the loss change when it is zeroed.
//! It is approximated to second order with the Fisher diagonal standing in
//! for the Hessian diagonal:
//!
//! `s_i = | g_i * theta_i - 0.5 * F_ii * theta_i^2 |`
//!
//! with gradient and Fisher both evaluated on the shared calibration batch.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::CalibrationBatch;
use crate::error::{check_dim, Error, Result};
use crate::model::{forward_loss_with, gradient_and_fisher, LossTarget, ModelSpec};
use crate::params::{dot, ParamVector};
use crate::seeds;

/// Nonnegative per-parameter loss-change magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityVector(Vec<f64>);

impl SensitivityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric("sensitivities must be finite and >= 0".into()));
        }
        Ok(SensitivityVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for SensitivityVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensitivitySketch(pub Vec<f64>);

impl SensitivitySketch {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for SensitivitySketch {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Which loss the sensitivity is measured with when the calibration batch has no labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledLoss {
    /// Cross-entropy against the model's own argmax prediction.
    #[default]
    SelfLabel,
    /// Entropy of the predicted distribution.
    Entropy,
}

fn calibration_target(calib: &CalibrationBatch, unlabeled: UnlabeledLoss) -> LossTarget {
    match (calib.batch.labels(), unlabeled) {
        (Some(_), _) => LossTarget::Labels,
        (None, UnlabeledLoss::SelfLabel) => LossTarget::SelfLabel,
        (None, UnlabeledLoss::Entropy) => LossTarget::Entropy,
    }
}

/// Second-order (Fisher) sensitivity of every parameter on the calibration batch.
pub fn sensitivity_second_order(
    spec: &ModelSpec,
    params: &ParamVector,
    calib: &CalibrationBatch,
    unlabeled: UnlabeledLoss,
) -> Result<SensitivityVector> {
    let target = calibration_target(calib, unlabeled);
    let (grad, fisher) = gradient_and_fisher(spec, params, &calib.batch.view(), target)?;
    let values = params
        .iter()
        .zip(grad.iter().zip(fisher.iter()))
        .map(|(&theta, (&g, &f))| (g * theta - 0.5 * f * theta * theta).abs())
        .collect();
    SensitivityVector::new(values)
}

/// Exact loss change `|F(theta) - F(theta with theta_i = 0)|` for the selected coordinates.
pub fn sensitivity_exact(
    spec: &ModelSpec,
    params: &ParamVector,
    calib: &CalibrationBatch,
    unlabeled: UnlabeledLoss,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let target = calibration_target(calib, unlabeled);
    let view = calib.batch.view();
    let base = forward_loss_with(spec, params, &view, target)?;
    let mut probe = params.clone();
    indices
        .iter()
        .map(|&i| {
            if i >= params.dim() {
                return Err(Error::Contract(format!(
                    "coordinate {i} out of range for {} parameters",
                    params.dim()
                )));
            }
            if params[i] == 0.0 {
                return Ok(0.0);
            }
            probe[i] = 0.0;
            let zeroed = forward_loss_with(spec, &probe, &view, target);
            probe[i] = params[i];
            Ok((base - zeroed?).abs())
        })
        .collect()
}

/// A `k x d` projection with i.i.d. `Normal(0, 1/k)` entries fixed by a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    seed: u64,
    k: usize,
    d: usize,
    entries: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn gaussian(seed: u64, k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Config(vec![format!(
                "projection needs k >= 1 and d >= 1 (got k={k}, d={d})"
            )]));
        }
        let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("positive std");
        let mut rng = seeds::rng(seed);
        let entries = (0..k * d).map(|_| normal.sample(&mut rng)).collect();
        Ok(ProjectionMatrix { seed, k, d, entries })
    }

    /// `k = d` identity; a test hook for exact-preservation checks.
    pub fn identity(d: usize) -> Self {
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            entries[i * d + i] = 1.0;
        }
        ProjectionMatrix {
            seed: 0,
            k: d,
            d,
            entries,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(self.k, self.d)
    }

    /// `R x` for any length-`d` vector.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("projection input", self.d, x.len())?;
        Ok(self
            .entries
            .chunks_exact(self.d)
            .map(|row| dot(row, x))
            .collect())
    }
}

pub fn compression_ratio(k: usize, d: usize) -> f64 {
    k as f64 / d as f64
}

pub fn sketch(sens: &SensitivityVector, proj: &ProjectionMatrix) -> Result<SensitivitySketch> {
    Ok(SensitivitySketch(proj.apply(sens.as_slice())?))
}

/// Cosine similarity clamped to `[-1, 1]`; zero if either vector has zero norm.
pub fn cosine<A: AsRef<[f64]> + ?Sized, B: AsRef<[f64]> + ?Sized>(a: &A, b: &B) -> Result<f64> {
    let (a, b) = (a.as_ref(), b.as_ref());
    check_dim("cosine", a.len(), b.len())?;
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a), dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JlReport {
    pub max_cosine_error: f64,
    pub median_cosine_error: f64,
    pub max_distance_distortion: f64,
    pub compression_ratio: f64,
}

/// Worst-case and median pairwise cosine error, and the worst relative
/// squared-distance distortion, of `proj` over `vectors`.
pub fn jl_quality_probe<V: AsRef<[f64]>>(proj: &ProjectionMatrix, vectors: &[V]) -> Result<JlReport> {
    if vectors.len() < 2 {
        return Err(Error::Contract("jl_quality_probe needs at least two vectors".into()));
    }
    let sketches = vectors
        .iter()
        .map(|v| proj.apply(v.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mut errors = Vec::new();
    let mut report = JlReport {
        max_cosine_error: 0.0,
        median_cosine_error: 0.0,
        max_distance_distortion: 0.0,
        compression_ratio: proj.compression_ratio(),
    };
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let (x, y) = (vectors[i].as_ref(), vectors[j].as_ref());
            let err = (cosine_unchecked(&sketches[i], &sketches[j]) - cosine_unchecked(x, y)).abs();
            report.max_cosine_error = report.max_cosine_error.max(err);
            errors.push(err);
            let full: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            if full > 0.0 {
                let sk: f64 = sketches[i]
                    .iter()
                    .zip(&sketches[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                report.max_distance_distortion =
                    report.max_distance_distortion.max((sk / full - 1.0).abs());
            }
        }
    }
    errors.sort_by(f64::total_cmp);
    let mid = errors.len() / 2;
    report.median_cosine_error = if errors.len() % 2 == 1 {
        errors[mid]
    } else {
        0.5 * (errors[mid - 1] + errors[mid])
    };
    Ok(report)
}

/// What the behavioral signal is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Projected parameter sensitivity on the calibration batch.
    #[default]
    Sensitivity,
    /// Projected raw parameters (sensitivity ablation).
    RawParameters,
}

/// Everything needed to turn a parameter vector into a behavioral sketch.
/// Shared read-only by the clients and the server of one run.
#[derive(Debug, Clone)]
pub struct Sketcher {
    pub spec: ModelSpec,
    pub calibration: CalibrationBatch,
    pub projection: ProjectionMatrix,
    pub unlabeled: UnlabeledLoss,
    pub signal: Signal,
}

impl Sketcher {
    pub fn sketch_params(&self, params: &ParamVector) -> Result<SensitivitySketch> {
        match self.signal {
            Signal::Sensitivity => {
                let sens =
                    sensitivity_second_order(&self.spec, params, &self.calibration, self.unlabeled)?;
                sketch(&sens, &self.projection)
            }
            Signal::RawParameters => Ok(SensitivitySketch(self.projection.apply(params)?)),
        }
    }
}
