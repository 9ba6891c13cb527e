//! Evaluation, learning-curve area, and the kappa/gradient-alignment probe.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gradient, loss_and_hits, BatchView, ModelSpec};
use crate::params::ParamVector;
use crate::sensitivity::cosine_unchecked;
use crate::strategy::AggregationEvent;

pub const UNITS_PER_DAY: u64 = 86_400;

/// Test accuracy (fraction of argmax hits) and mean cross-entropy.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, test: &BatchView<'_>) -> Result<(f64, f64)> {
    let (loss, hits) = loss_and_hits(spec, params, test)?;
    Ok((hits as f64 / test.len() as f64, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub virtual_time: u64,
    pub version: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

/// Trapezoidal area under accuracy over time, with time measured in virtual days.
pub fn aulc(curve: &[CurvePoint]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::Contract(format!(
            "aulc needs at least two curve points, got {}",
            curve.len()
        )));
    }
    Ok(curve
        .windows(2)
        .map(|w| {
            let dt = (w[1].virtual_time - w[0].virtual_time) as f64 / UNITS_PER_DAY as f64;
            0.5 * (w[0].test_accuracy + w[1].test_accuracy) * dt
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub virtual_time: u64,
    pub kappa: f64,
    pub align: f64,
}

/// Cosine between the held-out-batch gradients at the client's trained
/// parameters and at the current global parameters, paired with `kappa`.
pub fn alignment_probe(
    spec: &ModelSpec,
    global: &ParamVector,
    client: &ParamVector,
    probe_batch: &BatchView<'_>,
    kappa: f64,
    virtual_time: u64,
) -> Result<AlignmentSample> {
    let g_server = gradient(spec, global, probe_batch)?;
    let g_client = gradient(spec, client, probe_batch)?;
    Ok(AlignmentSample {
        virtual_time,
        kappa: kappa.clamp(-1.0, 1.0),
        align: cosine_unchecked(&g_client, &g_server),
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaBin {
    pub kappa_mid: f64,
    pub mean_align: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson_raw: Option<f64>,
    pub spearman_raw: Option<f64>,
    pub pearson_binned: Option<f64>,
    pub spearman_binned: Option<f64>,
    /// Nonempty bins only, in increasing kappa order.
    pub bins: Vec<KappaBin>,
}

/// Sample-level and kappa-binned correlation between kappa and alignment.
/// Bins tile `[-1, 1]` with width `bin_width`; empty bins are dropped.
pub fn binned_correlation(samples: &[AlignmentSample], bin_width: f64) -> Result<CorrelationReport> {
    if samples.len() < 10 {
        return Err(Error::Contract(format!(
            "binned correlation needs >= 10 samples, got {}",
            samples.len()
        )));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Contract(format!("bin width must be > 0, got {bin_width}")));
    }
    let kappas: Vec<f64> = samples.iter().map(|s| s.kappa).collect();
    let aligns: Vec<f64> = samples.iter().map(|s| s.align).collect();

    let n_bins = (2.0 / bin_width).ceil() as usize;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let idx = (((s.kappa + 1.0) / bin_width).floor().max(0.0) as usize).min(n_bins - 1);
        let e = sums.entry(idx).or_insert((0.0, 0));
        e.0 += s.align;
        e.1 += 1;
    }
    let bins: Vec<KappaBin> = sums
        .into_iter()
        .map(|(i, (sum, count))| KappaBin {
            kappa_mid: -1.0 + (i as f64 + 0.5) * bin_width,
            mean_align: sum / count as f64,
            count,
        })
        .collect();
    let mids: Vec<f64> = bins.iter().map(|b| b.kappa_mid).collect();
    let means: Vec<f64> = bins.iter().map(|b| b.mean_align).collect();
    Ok(CorrelationReport {
        pearson_raw: pearson(&kappas, &aligns),
        spearman_raw: spearman(&kappas, &aligns),
        pearson_binned: pearson(&mids, &means),
        spearman_binned: spearman(&mids, &means),
        bins,
    })
}

/// Everything one simulation produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub curve: Vec<CurvePoint>,
    pub events: Vec<AggregationEvent>,
    pub final_params: ParamVector,
    pub config_hash: String,
    pub probe: Vec<AlignmentSample>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub uploads: u64,
    pub aggregations: u64,
    pub max_concurrent: usize,
    /// Histogram of version gaps at receipt, index = tau.
    pub staleness_histogram: Vec<u64>,
    pub thermometer_m0: Option<f64>,
    pub thermometer_m0_clamped: bool,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.curve.last().map(|p| p.test_accuracy)
    }

    pub fn aulc(&self) -> Option<f64> {
        aulc(&self.curve).ok()
    }
}

/// One row of the per-run summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub dataset: String,
    pub alpha: f64,
    pub latency_kind: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub aulc: Option<f64>,
}

pub const SUMMARY_CSV_HEADER: &str = "strategy,dataset,alpha,latency_kind,seed,final_accuracy,aulc";

impl SummaryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.strategy,
            self.dataset,
            self.alpha,
            self.latency_kind,
            self.seed,
            self.final_accuracy,
            self.aulc.map(|a| a.to_string()).unwrap_or_default()
        )
    }
}

/// One cell of a strategy x setting table, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub strategy: String,
    pub dataset: String,
    pub alpha: f64,
    pub latency_kind: String,
    pub runs: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: Option<f64>,
    pub aulc_mean: Option<f64>,
    pub aulc_std: Option<f64>,
}

pub const TABLE_CSV_HEADER: &str =
    "strategy,dataset,alpha,latency_kind,runs,final_accuracy_mean,final_accuracy_std,aulc_mean,aulc_std";

impl TableRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.strategy,
            self.dataset,
            self.alpha,
            self.latency_kind,
            self.runs,
            self.final_accuracy_mean,
            opt(self.final_accuracy_std),
            opt(self.aulc_mean),
            opt(self.aulc_std)
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (mean, std)
}

/// Groups per-run rows by (strategy, dataset, alpha, latency) and reports mean and
/// sample standard deviation over seeds. Rows keep first-seen group order.
pub fn compare_runs(rows: &[SummaryRow]) -> Vec<TableRow> {
    let mut groups: Vec<(&SummaryRow, Vec<&SummaryRow>)> = Vec::new();
    for row in rows {
        let key_match = |g: &&SummaryRow| {
            g.strategy == row.strategy
                && g.dataset == row.dataset
                && g.alpha.to_bits() == row.alpha.to_bits()
                && g.latency_kind == row.latency_kind
        };
        match groups.iter_mut().find(|(k, _)| key_match(k)) {
            Some((_, members)) => members.push(row),
            None => groups.push((row, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let accs: Vec<f64> = members.iter().map(|r| r.final_accuracy).collect();
            let aulcs: Vec<f64> = members.iter().filter_map(|r| r.aulc).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (aulc_mean, aulc_std) = if aulcs.len() == members.len() {
                let (m, s) = mean_std(&aulcs);
                (Some(m), s)
            } else {
                (None, None)
            };
            TableRow {
                strategy: key.strategy.clone(),
                dataset: key.dataset.clone(),
                alpha: key.alpha,
                latency_kind: key.latency_kind.clone(),
                runs: members.len(),
                final_accuracy_mean: acc_mean,
                final_accuracy_std: acc_std,
                aulc_mean,
                aulc_std,
            }
        })
        .collect()
}
