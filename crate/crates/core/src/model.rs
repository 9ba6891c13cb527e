//! Small differentiable classifiers over flat parameter vectors.
//!
//! Two architectures are supported: a single fully-connected layer and a
//! one-hidden-layer ReLU network. Both use mean cross-entropy. Gradients are
//! exact (hand-derived backpropagation) and the Fisher diagonal is the mean
//! of squared per-sample gradients.
//!
//! Parameter layout, row-major:
//! - linear: `W[n_classes][in_dim]`, then `b[n_classes]`
//! - mlp: `W1[hidden][in_dim]`, `b1[hidden]`, `W2[n_classes][hidden]`, `b2[n_classes]`

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::params::{axpy, axpy4, dot, dot4, ParamVector};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear {
        in_dim: usize,
        n_classes: usize,
    },
    Mlp {
        in_dim: usize,
        hidden: usize,
        n_classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub loss: Loss,
}

impl ModelSpec {
    pub fn linear(in_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear { in_dim, n_classes },
            loss: Loss::CrossEntropy,
        }
    }

    pub fn mlp(in_dim: usize, hidden: usize, n_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp {
                in_dim,
                hidden,
                n_classes,
            },
            loss: Loss::CrossEntropy,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self.architecture {
            Architecture::Linear { in_dim, .. } | Architecture::Mlp { in_dim, .. } => in_dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.architecture {
            Architecture::Linear { n_classes, .. } | Architecture::Mlp { n_classes, .. } => {
                n_classes
            }
        }
    }

    /// Number of scalar parameters `d`.
    pub fn param_count(&self) -> usize {
        match self.architecture {
            Architecture::Linear { in_dim, n_classes } => n_classes * (in_dim + 1),
            Architecture::Mlp {
                in_dim,
                hidden,
                n_classes,
            } => hidden * (in_dim + 1) + n_classes * (hidden + 1),
        }
    }

    fn check(&self, params: &ParamVector, batch: &BatchView<'_>) -> Result<()> {
        check_dim("model parameters", self.param_count(), params.dim())?;
        check_dim("batch input width", self.in_dim(), batch.in_dim)
    }
}

/// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = seeds::rng(seed);
    let mut out = Vec::with_capacity(spec.param_count());
    let mut layer = |fan_in: usize, count: usize, out: &mut Vec<f64>| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        out.extend((0..count).map(|_| rng.random_range(-bound..=bound)));
    };
    match spec.architecture {
        Architecture::Linear { in_dim, n_classes } => {
            layer(in_dim, n_classes * (in_dim + 1), &mut out);
        }
        Architecture::Mlp {
            in_dim,
            hidden,
            n_classes,
        } => {
            layer(in_dim, hidden * (in_dim + 1), &mut out);
            layer(hidden, n_classes * (hidden + 1), &mut out);
        }
    }
    ParamVector::new(out)
}

/// An owned batch of samples with flat row-major inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    in_dim: usize,
    labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, in_dim: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        BatchView::new(&inputs, in_dim, labels.as_deref())?;
        Ok(Batch {
            inputs,
            in_dim,
            labels,
        })
    }

    pub fn view(&self) -> BatchView<'_> {
        BatchView {
            inputs: &self.inputs,
            in_dim: self.in_dim,
            labels: self.labels.as_deref(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

/// A borrowed batch; client shards are views into the shared training set.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    inputs: &'a [f64],
    in_dim: usize,
    labels: Option<&'a [usize]>,
}

impl<'a> BatchView<'a> {
    pub fn new(inputs: &'a [f64], in_dim: usize, labels: Option<&'a [usize]>) -> Result<Self> {
        if in_dim == 0 || inputs.is_empty() || inputs.len() % in_dim != 0 {
            return Err(Error::Contract(format!(
                "batch needs at least one row of width {in_dim}, got {} values",
                inputs.len()
            )));
        }
        let rows = inputs.len() / in_dim;
        if let Some(labels) = labels {
            check_dim("batch labels", rows, labels.len())?;
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: "input" });
        }
        Ok(BatchView {
            inputs,
            in_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.inputs[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&'a [usize]> {
        self.labels
    }

    pub fn to_owned(&self) -> Batch {
        Batch {
            inputs: self.inputs.to_vec(),
            in_dim: self.in_dim,
            labels: self.labels.map(<[usize]>::to_vec),
        }
    }
}

/// What each sample's loss is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Cross-entropy against the batch labels (required).
    #[default]
    Labels,
    /// Cross-entropy against the model's own argmax prediction.
    SelfLabel,
    /// Entropy of the predicted class distribution.
    Entropy,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Default)]
struct Workspace {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

struct Layout {
    in_dim: usize,
    hidden: usize,
    n_classes: usize,
    mlp: bool,
}

impl Layout {
    fn of(spec: &ModelSpec) -> Self {
        match spec.architecture {
            Architecture::Linear { in_dim, n_classes } => Layout {
                in_dim,
                hidden: 0,
                n_classes,
                mlp: false,
            },
            Architecture::Mlp {
                in_dim,
                hidden,
                n_classes,
            } => Layout {
                in_dim,
                hidden,
                n_classes,
                mlp: true,
            },
        }
    }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Workspace {
    /// Forward pass; leaves class probabilities in `self.probs`.
    fn forward(&mut self, layout: &Layout, p: &[f64], x: &[f64]) -> Result<()> {
        let (n_in, c) = (layout.in_dim, layout.n_classes);
        self.probs.resize(c, 0.0);
        if layout.mlp {
            let h = layout.hidden;
            let (w1, rest) = p.split_at(h * n_in);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            self.hidden.resize(h, 0.0);
            for j in 0..h {
                let z = b1[j] + dot(&w1[j * n_in..(j + 1) * n_in], x);
                self.hidden[j] = z;
            }
            if !self.hidden.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: "hidden" });
            }
            // keep pre-activations in `dhidden` for the ReLU mask
            self.dhidden.clear();
            self.dhidden.extend_from_slice(&self.hidden);
            for v in self.hidden.iter_mut() {
                *v = v.max(0.0);
            }
            for k in 0..c {
                self.probs[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &self.hidden);
            }
        } else {
            let (w, b) = p.split_at(c * n_in);
            for k in 0..c {
                self.probs[k] = b[k] + dot(&w[k * n_in..(k + 1) * n_in], x);
            }
        }
        if !self.probs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: "output" });
        }
        softmax_in_place(&mut self.probs);
        Ok(())
    }

    /// Per-sample loss; fills `dlogits` with d(loss)/d(logits).
    fn loss_and_dlogits(&mut self, target: LossTarget, label: Option<usize>) -> Result<f64> {
        let c = self.probs.len();
        self.dlogits.clear();
        self.dlogits.extend_from_slice(&self.probs);
        let loss = match target {
            LossTarget::Labels | LossTarget::SelfLabel => {
                let y = match (target, label) {
                    (LossTarget::Labels, Some(y)) => y,
                    (LossTarget::Labels, None) => {
                        return Err(Error::Contract("loss requires labels".into()))
                    }
                    _ => argmax(&self.probs),
                };
                if y >= c {
                    return Err(Error::Contract(format!(
                        "label {y} out of range for {c} classes"
                    )));
                }
                self.dlogits[y] -= 1.0;
                -self.probs[y].max(f64::MIN_POSITIVE).ln()
            }
            LossTarget::Entropy => {
                let ent: f64 = self
                    .probs
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                for (d, &p) in self.dlogits.iter_mut().zip(&self.probs) {
                    *d = if p > 0.0 { -p * (p.ln() + ent) } else { 0.0 };
                }
                ent
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: "loss" });
        }
        Ok(loss)
    }

    /// Adds `scale * d(loss)/d(params)` into `grad`. Requires a prior `forward`
    /// and `loss_and_dlogits` on the same sample.
    fn backward(&mut self, layout: &Layout, p: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) {
        let (n_in, c) = (layout.in_dim, layout.n_classes);
        if layout.mlp {
            let h = layout.hidden;
            let w2_off = h * n_in + h;
            let w2 = &p[w2_off..w2_off + c * h];
            let (gw1, rest) = grad.split_at_mut(h * n_in);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            // pre-activations were stashed in dhidden by forward
            let pre = std::mem::take(&mut self.dhidden);
            let mut dh = vec![0.0; h];
            for k in 0..c {
                let dk = self.dlogits[k];
                if dk == 0.0 {
                    continue;
                }
                gb2[k] += scale * dk;
                axpy(scale * dk, &self.hidden, &mut gw2[k * h..(k + 1) * h]);
                axpy(dk, &w2[k * h..(k + 1) * h], &mut dh);
            }
            for j in 0..h {
                if pre[j] <= 0.0 || dh[j] == 0.0 {
                    continue;
                }
                gb1[j] += scale * dh[j];
                axpy(scale * dh[j], x, &mut gw1[j * n_in..(j + 1) * n_in]);
            }
            self.dhidden = pre;
        } else {
            let (gw, gb) = grad.split_at_mut(c * n_in);
            for k in 0..c {
                let dk = self.dlogits[k];
                if dk == 0.0 {
                    continue;
                }
                gb[k] += scale * dk;
                axpy(scale * dk, x, &mut gw[k * n_in..(k + 1) * n_in]);
            }
        }
    }
}

/// Class probabilities for one input row.
pub fn predict_proba(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("model parameters", spec.param_count(), params.dim())?;
    check_dim("input width", spec.in_dim(), x.len())?;
    let mut ws = Workspace::default();
    ws.forward(&Layout::of(spec), params, x)?;
    Ok(ws.probs)
}

/// Mean per-sample loss and predicted-class hits over a batch.
pub(crate) fn loss_and_hits(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &BatchView<'_>,
) -> Result<(f64, usize)> {
    spec.check(params, batch)?;
    let layout = Layout::of(spec);
    let mut ws = Workspace::default();
    let mut total = 0.0;
    let mut hits = 0;
    for i in 0..batch.len() {
        ws.forward(&layout, params, batch.row(i))?;
        let label = batch.label(i);
        if label == Some(argmax(&ws.probs)) {
            hits += 1;
        }
        total += ws.loss_and_dlogits(LossTarget::Labels, label)?;
    }
    Ok((total / batch.len() as f64, hits))
}

/// Mean cross-entropy of the batch against its labels.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &BatchView<'_>) -> Result<f64> {
    forward_loss_with(spec, params, batch, LossTarget::Labels)
}

pub fn forward_loss_with(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &BatchView<'_>,
    target: LossTarget,
) -> Result<f64> {
    spec.check(params, batch)?;
    let layout = Layout::of(spec);
    let mut ws = Workspace::default();
    let mut total = 0.0;
    for i in 0..batch.len() {
        ws.forward(&layout, params, batch.row(i))?;
        total += ws.loss_and_dlogits(target, batch.label(i))?;
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`forward_loss`].
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &BatchView<'_>) -> Result<ParamVector> {
    gradient_with(spec, params, batch, LossTarget::Labels)
}

pub fn gradient_with(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &BatchView<'_>,
    target: LossTarget,
) -> Result<ParamVector> {
    spec.check(params, batch)?;
    let mut grad = vec![0.0; params.dim()];
    let rows: Vec<usize> = (0..batch.len()).collect();
    accumulate_mean_gradient(spec, params, batch, &rows, target, &mut grad)?;
    Ok(ParamVector::new(grad))
}

/// Adds the mean gradient over `rows` of `batch` into `grad`; returns the mean loss.
fn accumulate_mean_gradient(
    spec: &ModelSpec,
    params: &[f64],
    batch: &BatchView<'_>,
    rows: &[usize],
    target: LossTarget,
    grad: &mut [f64],
) -> Result<f64> {
    let layout = Layout::of(spec);
    let mut ws = Workspace::default();
    let scale = 1.0 / rows.len() as f64;
    if !layout.mlp {
        return accumulate_linear_grouped(&layout, params, batch, rows, target, scale, &mut ws, grad);
    }
    let mut total = 0.0;
    for &i in rows {
        let x = batch.row(i);
        ws.forward(&layout, params, x)?;
        total += ws.loss_and_dlogits(target, batch.label(i))?;
        ws.backward(&layout, params, x, scale, grad);
    }
    Ok(total * scale)
}

/// Linear-model gradient over `rows`, four samples per pass over each weight
/// row so the weights and their gradient are streamed once per group.
#[allow(clippy::too_many_arguments)]
fn accumulate_linear_grouped(
    layout: &Layout,
    params: &[f64],
    batch: &BatchView<'_>,
    rows: &[usize],
    target: LossTarget,
    scale: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> Result<f64> {
    let (n_in, c) = (layout.in_dim, layout.n_classes);
    let (w, b) = params.split_at(c * n_in);
    let (gw, gb) = grad.split_at_mut(c * n_in);
    let mut logits = vec![0.0; 4 * c];
    let mut dl = vec![0.0; 4 * c];
    let mut total = 0.0;
    for group in rows.chunks(4) {
        let g = group.len();
        // Short groups repeat their first row with a zero coefficient.
        let xs: [&[f64]; 4] = std::array::from_fn(|s| batch.row(group[if s < g { s } else { 0 }]));
        for k in 0..c {
            let z = dot4(&w[k * n_in..(k + 1) * n_in], xs);
            for s in 0..4 {
                logits[s * c + k] = b[k] + z[s];
            }
        }
        for s in 0..4 {
            if s >= g {
                dl[s * c..(s + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            ws.probs.clear();
            ws.probs.extend_from_slice(&logits[s * c..(s + 1) * c]);
            if !ws.probs.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: "output" });
            }
            softmax_in_place(&mut ws.probs);
            total += ws.loss_and_dlogits(target, batch.label(group[s]))?;
            for k in 0..c {
                dl[s * c + k] = scale * ws.dlogits[k];
            }
        }
        for k in 0..c {
            let a = [dl[k], dl[c + k], dl[2 * c + k], dl[3 * c + k]];
            gb[k] += (a[0] + a[1]) + (a[2] + a[3]);
            axpy4(a, xs, &mut gw[k * n_in..(k + 1) * n_in]);
        }
    }
    Ok(total * scale)
}

/// Empirical Fisher diagonal: mean over samples of squared per-sample gradients.
pub fn fisher_diagonal(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &BatchView<'_>,
) -> Result<ParamVector> {
    Ok(gradient_and_fisher(spec, params, batch, LossTarget::Labels)?.1)
}

/// Mean gradient and Fisher diagonal in a single pass over the batch.
pub fn gradient_and_fisher(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &BatchView<'_>,
    target: LossTarget,
) -> Result<(ParamVector, ParamVector)> {
    spec.check(params, batch)?;
    let layout = Layout::of(spec);
    let d = params.dim();
    let m = batch.len() as f64;
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; d];
    let mut fisher = vec![0.0; d];
    let mut sample = vec![0.0; d];
    for i in 0..batch.len() {
        let x = batch.row(i);
        ws.forward(&layout, params, x)?;
        ws.loss_and_dlogits(target, batch.label(i))?;
        sample.iter_mut().for_each(|v| *v = 0.0);
        ws.backward(&layout, params, x, 1.0, &mut sample);
        for ((g, f), s) in grad.iter_mut().zip(fisher.iter_mut()).zip(&sample) {
            *g += s;
            *f += s * s;
        }
    }
    grad.iter_mut().for_each(|v| *v /= m);
    fisher.iter_mut().for_each(|v| *v /= m);
    Ok((ParamVector::new(grad), ParamVector::new(fisher)))
}

/// Loss and gradient of a single sample.
pub fn sample_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &[f64],
    label: Option<usize>,
    target: LossTarget,
) -> Result<(f64, ParamVector)> {
    check_dim("model parameters", spec.param_count(), params.dim())?;
    check_dim("input width", spec.in_dim(), x.len())?;
    let layout = Layout::of(spec);
    let mut ws = Workspace::default();
    ws.forward(&layout, params, x)?;
    let loss = ws.loss_and_dlogits(target, label)?;
    let mut grad = vec![0.0; params.dim()];
    ws.backward(&layout, params, x, 1.0, &mut grad);
    Ok((loss, ParamVector::new(grad)))
}

/// Plain minibatch SGD over `data` for `epochs` passes, reshuffled each epoch.
pub fn local_update(
    spec: &ModelSpec,
    start: &ParamVector,
    data: &BatchView<'_>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ParamVector> {
    spec.check(start, data)?;
    if batch_size == 0 || !(lr >= 0.0) {
        return Err(Error::Contract(format!(
            "local_update needs batch_size >= 1 and lr >= 0 (got {batch_size}, {lr})"
        )));
    }
    let mut params = start.clone();
    if lr == 0.0 {
        return Ok(params);
    }
    let mut rng = seeds::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; params.dim()];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            accumulate_mean_gradient(spec, &params, data, rows, LossTarget::Labels, &mut grad)?;
            axpy(-lr, &grad, &mut params);
        }
    }
    params.ensure_finite("sgd step")?;
    Ok(params)
}
