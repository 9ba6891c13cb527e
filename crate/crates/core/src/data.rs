//! Datasets, non-IID client partitioning and the shared calibration batch.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, BatchView};
use crate::seeds;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labelled dataset with flat row-major inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    in_dim: usize,
    n_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, in_dim: usize, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if in_dim == 0 || inputs.len() != labels.len() * in_dim {
            return Err(Error::Contract(format!(
                "{} input values do not form {} rows of width {in_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if labels.len() < n_classes {
            return Err(Error::Contract(format!(
                "dataset has {} samples but {n_classes} classes",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Contract(format!("label {bad} >= n_classes {n_classes}")));
        }
        Ok(Dataset {
            in_dim,
            n_classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn view(&self) -> BatchView<'_> {
        self.slice(0..self.len())
    }

    /// Rows `range` as a borrowed labelled batch.
    pub fn slice(&self, range: Range<usize>) -> BatchView<'_> {
        BatchView::new(
            &self.inputs[range.start * self.in_dim..range.end * self.in_dim],
            self.in_dim,
            Some(&self.labels[range]),
        )
        .expect("dataset rows are validated at construction")
    }

    /// A new dataset holding the given rows in the given order.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.in_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            in_dim: self.in_dim,
            n_classes: self.n_classes,
            inputs,
            labels,
        }
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn parse_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect()
}

/// Loads an IDX image/label file pair (optionally gzip-compressed).
/// Pixel bytes are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gzip(images_path)?;
    let labels = read_maybe_gzip(labels_path)?;

    let dims = parse_header(&images, images_path, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let in_dim = rows * cols;
    let body = 16;
    let needed = body + n * in_dim;
    if images.len() < needed {
        return Err(Error::Parse {
            path: images_path.to_path_buf(),
            offset: images.len() as u64,
            message: format!("truncated: {n} images of {rows}x{cols} need {needed} bytes"),
        });
    }

    let label_count = parse_header(&labels, labels_path, IDX_LABELS_MAGIC, 1)?[0];
    if label_count != n {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("label count {label_count} does not match image count {n}"),
        });
    }
    if labels.len() < 8 + n {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: labels.len() as u64,
            message: format!("truncated: {n} labels need {} bytes", 8 + n),
        });
    }

    let inputs = images[body..needed].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, in_dim, labels, n_classes)
}

/// Gaussian class clusters with unit within-class spread. Class means sit at
/// distance 3 from the origin: on distinct axes when `in_dim >= n_classes`,
/// otherwise evenly spaced on a circle in the first two coordinates.
pub fn make_synthetic(n_classes: usize, in_dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || in_dim == 0 || per_class == 0 {
        return Err(Error::Contract("make_synthetic counts must be >= 1".into()));
    }
    const RADIUS: f64 = 3.0;
    let mean = |c: usize| -> Vec<f64> {
        let mut m = vec![0.0; in_dim];
        if in_dim >= n_classes {
            m[c] = RADIUS;
        } else if in_dim >= 2 {
            let angle = std::f64::consts::TAU * c as f64 / n_classes as f64;
            m[0] = RADIUS * angle.cos();
            m[1] = RADIUS * angle.sin();
        } else {
            m[0] = RADIUS * c as f64;
        }
        m
    };
    let mut rng = seeds::rng(seed);
    let mut inputs = Vec::with_capacity(n_classes * per_class * in_dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let mu = mean(c);
        for _ in 0..per_class {
            for &m in &mu {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(m + z);
            }
            labels.push(c);
        }
    }
    // interleave classes so that file order carries no label structure
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    Ok(Dataset::new(inputs, in_dim, labels, n_classes)?.gather(&order))
}

/// Shuffles with `seed` and holds out the last `test_fraction` of rows.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if !(0.0..1.0).contains(&test_fraction) || n_test == 0 || n_test >= n {
        return Err(Error::Setup(format!(
            "cannot hold out fraction {test_fraction} of {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed));
    let (train, test) = order.split_at(n - n_test);
    Ok((data.gather(train), data.gather(test)))
}

/// Client index lists over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }
}

/// Splits `counts` of `total` items by proportions with largest-remainder rounding.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // stable sort keeps lower client ids first on ties
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_sample(rng: &mut impl Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0 checked by caller");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|g| g / sum).collect()
    } else {
        // every draw underflowed: all mass on one client
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        p
    }
}

/// Per-class Dirichlet label partition. For each class, proportions are
/// drawn from `Dirichlet(alpha)` over clients and that class's (shuffled)
/// samples are dealt out accordingly; empty clients then take one sample
/// each from the currently largest client.
pub fn dirichlet_partition(data: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::Setup("n_clients must be >= 1".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Setup(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    if data.len() < n_clients {
        return Err(Error::Setup(format!(
            "{} training samples cannot cover {n_clients} clients",
            data.len()
        )));
    }
    let mut rng = seeds::rng(seed);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for c in 0..data.n_classes() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let p = dirichlet_sample(&mut rng, alpha, n_clients);
        let counts = largest_remainder(&p, members.len());
        let mut rest = members.as_slice();
        for (client, &k) in clients.iter_mut().zip(&counts) {
            let (take, tail) = rest.split_at(k);
            client.extend_from_slice(take);
            rest = tail;
        }
    }
    for i in 0..n_clients {
        if clients[i].is_empty() {
            let donor = (0..n_clients)
                .max_by_key(|&j| (clients[j].len(), std::cmp::Reverse(j)))
                .expect("n_clients >= 1");
            let moved = clients[donor].pop().expect("donor holds >= 2 samples");
            clients[i].push(moved);
        }
    }
    for client in &mut clients {
        client.sort_unstable();
    }
    Ok(PartitionPlan {
        client_indices: clients,
        alpha,
        seed,
    })
}

/// Training data reordered so that every client's shard is a contiguous range.
#[derive(Debug, Clone)]
pub struct ClientShards {
    data: Dataset,
    ranges: Vec<Range<usize>>,
}

impl ClientShards {
    pub fn new(train: &Dataset, plan: &PartitionPlan) -> Self {
        let mut order = Vec::with_capacity(train.len());
        let mut ranges = Vec::with_capacity(plan.n_clients());
        for indices in &plan.client_indices {
            let start = order.len();
            order.extend_from_slice(indices);
            ranges.push(start..order.len());
        }
        ClientShards {
            data: train.gather(&order),
            ranges,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.ranges.len()
    }

    pub fn client(&self, i: usize) -> BatchView<'_> {
        self.data.slice(self.ranges[i].clone())
    }

    pub fn client_len(&self, i: usize) -> usize {
        self.ranges[i].len()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// i.i.d. standard normal features, no labels.
    Gaussian,
    /// Rows sampled from the training pool, labels kept.
    Real,
}

/// The shared batch every sensitivity evaluation in a run is computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    pub source: CalibrationSource,
    pub seed: u64,
    pub batch: Batch,
}

pub const DEFAULT_CALIBRATION_SIZE: usize = 64;

pub fn make_calibration_batch(
    source: CalibrationSource,
    in_dim: usize,
    size: usize,
    seed: u64,
    dataset: Option<&Dataset>,
) -> Result<CalibrationBatch> {
    if size == 0 || in_dim == 0 {
        return Err(Error::Config(vec!["calibration batch size and width must be >= 1".into()]));
    }
    let mut rng = seeds::rng(seed);
    let batch = match source {
        CalibrationSource::Gaussian => {
            let inputs = (0..size * in_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            Batch::new(inputs, in_dim, None)?
        }
        CalibrationSource::Real => {
            let data = dataset.ok_or_else(|| {
                Error::Config(vec!["real calibration batch requires a dataset".into()])
            })?;
            if data.in_dim() != in_dim {
                return Err(Error::DimMismatch {
                    context: "calibration dataset width",
                    expected: in_dim,
                    got: data.in_dim(),
                });
            }
            let rows: Vec<usize> = if size <= data.len() {
                index::sample(&mut rng, data.len(), size).into_vec()
            } else {
                (0..size).map(|_| rng.random_range(0..data.len())).collect()
            };
            let picked = data.gather(&rows);
            Batch::new(picked.inputs, in_dim, Some(picked.labels))?
        }
    };
    Ok(CalibrationBatch {
        source,
        seed,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = make_synthetic(3, 4, 1, 9).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(make_synthetic(3, 4, 20, 9).unwrap(), make_synthetic(3, 4, 20, 9).unwrap());
        assert_ne!(make_synthetic(3, 4, 20, 9).unwrap(), make_synthetic(3, 4, 20, 10).unwrap());
    }

    #[test]
    fn single_client_takes_everything() {
        let d = make_synthetic(4, 3, 10, 1).unwrap();
        let plan = dirichlet_partition(&d, 1, 0.5, 3).unwrap();
        assert_eq!(plan.client_indices[0], (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_samples_is_setup_error() {
        let d = make_synthetic(2, 2, 2, 1).unwrap();
        assert!(matches!(dirichlet_partition(&d, 5, 1.0, 0), Err(Error::Setup(_))));
        assert!(dirichlet_partition(&d, 2, 0.0, 0).is_err());
    }

    #[test]
    fn largest_remainder_preserves_total() {
        let counts = largest_remainder(&[0.333, 0.333, 0.334], 10);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts, vec![3, 3, 4]);
    }

    #[test]
    fn split_holds_out_ten_percent() {
        let d = make_synthetic(2, 3, 50, 4).unwrap();
        let (train, test) = train_test_split(&d, 0.1, 8).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
    }

    #[test]
    fn gaussian_calibration_is_centered_and_unlabelled() {
        let cal = make_calibration_batch(CalibrationSource::Gaussian, 32, 64, 5, None).unwrap();
        let inputs = cal.batch.inputs();
        let mean = inputs.iter().sum::<f64>() / inputs.len() as f64;
        assert!(mean.abs() < 4.0 / ((64 * 32) as f64).sqrt());
        assert!(cal.batch.labels().is_none());
        let again = make_calibration_batch(CalibrationSource::Gaussian, 32, 64, 5, None).unwrap();
        assert_eq!(cal, again);
    }

    #[test]
    fn real_calibration_samples_without_replacement() {
        let d = make_synthetic(2, 3, 40, 2).unwrap();
        let cal = make_calibration_batch(CalibrationSource::Real, 3, 80, 1, Some(&d)).unwrap();
        // drawing all 80 rows without replacement is a permutation of the data
        let mut got: Vec<u64> = cal.batch.inputs().iter().map(|v| v.to_bits()).collect();
        let mut all: Vec<u64> = d.inputs().iter().map(|v| v.to_bits()).collect();
        got.sort_unstable();
        all.sort_unstable();
        assert_eq!(got, all);
        assert!(matches!(
            make_calibration_batch(CalibrationSource::Real, 3, 8, 1, None),
            Err(Error::Config(_))
        ));
    }
}
