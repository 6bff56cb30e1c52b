//! Uniform ±1 samples labelled by a parity.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::fourier::{bits_to_signs, guard_dim, ParityInstance};
use crate::rng::{stream_rng, LabRng, Stream};

/// `m` inputs as rows of `x` with labels `y = χ_S(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(LabError::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn label_mean(&self) -> f64 {
        self.y.mean().unwrap_or(0.0)
    }

    /// Copies the rows listed in `idx` into the batch buffers.
    pub fn gather_into(&self, idx: &[usize], mut xb: ArrayViewMut2<'_, f64>, mut yb: ArrayViewMut1<'_, f64>) {
        for (row, &i) in idx.iter().enumerate() {
            xb.row_mut(row).assign(&self.x.row(i));
            yb[row] = self.y[i];
        }
    }
}

/// Fills `x` with uniform ±1 entries and `y` with the matching labels.
pub fn fill_uniform(rng: &mut LabRng, inst: &ParityInstance, mut x: ArrayViewMut2<'_, f64>, mut y: ArrayViewMut1<'_, f64>) {
    let n = inst.n();
    for (mut row, label) in x.rows_mut().into_iter().zip(y.iter_mut()) {
        let mut j = 0;
        while j < n {
            let mut word: u64 = rng.random();
            let end = (j + 64).min(n);
            for v in row.slice_mut(ndarray::s![j..end]).iter_mut() {
                *v = if word & 1 == 1 { 1.0 } else { -1.0 };
                word >>= 1;
            }
            j = end;
        }
        *label = inst.support().iter().map(|&i| row[i]).product();
    }
}

/// `m` i.i.d. uniform samples; deterministic in `seed`.
pub fn generate_dataset(inst: &ParityInstance, m: usize, seed: u64) -> Result<Dataset> {
    if m == 0 {
        return invalid("dataset size m must be at least 1");
    }
    sample_dataset(inst, m, &mut stream_rng(seed, Stream::Data))
}

pub fn sample_dataset(inst: &ParityInstance, m: usize, rng: &mut LabRng) -> Result<Dataset> {
    let mut x = Array2::zeros((m, inst.n()));
    let mut y = Array1::zeros(m);
    fill_uniform(rng, inst, x.view_mut(), y.view_mut());
    Dataset::new(x, y)
}

/// Every point of `{±1}^n` once, in bit order.
pub fn full_cube(inst: &ParityInstance) -> Result<Dataset> {
    let n = inst.n();
    guard_dim(n)?;
    let total = 1usize << n;
    let mut x = Array2::zeros((total, n));
    let mut y = Array1::zeros(total);
    let mut buf = vec![0.0; n];
    for bits in 0..total {
        bits_to_signs(bits as u64, &mut buf);
        x.row_mut(bits).assign(&ArrayView1::from(&buf));
        y[bits] = inst.eval_bits(bits as u64);
    }
    Dataset::new(x, y)
}
