//! Flat parameter vectors shared by the model, sensitivity and aggregation code.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A flat vector of model parameters (or a parameter delta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Fails with [`Error::NonFinite`] naming `layer` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, layer: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { layer })
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        check_dim("add_scaled", self.dim(), other.dim())?;
        axpy(scale, &other.0, &mut self.0);
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dim("sub", self.dim(), other.dim())?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dim("dot", self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // independent lanes so the loop vectorizes without fast-math
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    for (yi, xi) in y[..n].iter_mut().zip(&x[..n]) {
        *yi += alpha * xi;
    }
}

/// Four dot products against a shared `w`, reading `w` once.
#[inline]
pub(crate) fn dot4(w: &[f64], x: [&[f64]; 4]) -> [f64; 4] {
    const LANES: usize = 4;
    let mut acc = [[0.0f64; LANES]; 4];
    let n = w.len();
    let full = n - n % LANES;
    let (w_main, w_rest) = w.split_at(full);
    let xs = x.map(|r| &r[..n]);
    for (c, wc) in w_main.chunks_exact(LANES).enumerate() {
        let o = c * LANES;
        for (s, xr) in xs.iter().enumerate() {
            let xc = &xr[o..o + LANES];
            for l in 0..LANES {
                acc[s][l] += wc[l] * xc[l];
            }
        }
    }
    let mut out = [0.0; 4];
    for s in 0..4 {
        let a = &acc[s];
        let mut v = (a[0] + a[1]) + (a[2] + a[3]);
        for (j, wj) in w_rest.iter().enumerate() {
            v += wj * xs[s][full + j];
        }
        out[s] = v;
    }
    out
}

/// `y += a[0] x[0] + a[1] x[1] + a[2] x[2] + a[3] x[3]`, reading `y` once.
#[inline]
pub(crate) fn axpy4(a: [f64; 4], x: [&[f64]; 4], y: &mut [f64]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] += (a[0] * x0[i] + a[1] * x1[i]) + (a[2] * x2[i] + a[3] * x3[i]);
    }
}
