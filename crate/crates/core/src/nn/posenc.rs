//! Fixed sinusoidal position codes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which position bank to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionKind {
    /// Over a sequence index, `[len, C]`.
    Linear { len: usize },
    /// Over a `rows × cols` grid, flattened row-major to `[rows·cols, C]`.
    Grid { rows: usize, cols: usize },
}

/// `pe[p, 2i] = sin(p / 10000^(2i/C))`, `pe[p, 2i+1] = cos(…)`.
pub fn sine_1d<T: Scalar>(len: usize, width: usize) -> Result<Tensor<T>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "1D position code needs an even width, got {width}"
        )));
    }
    let mut data = Vec::with_capacity(len * width);
    for p in 0..len {
        for i in 0..width / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / width as f64);
            let angle = p as f64 * freq;
            data.push(T::from_f64_lossy(angle.sin()));
            data.push(T::from_f64_lossy(angle.cos()));
        }
    }
    Tensor::new(&[len, width], data)
}

/// Row-index bank in the first `C/2` channels, column-index bank in the rest.
pub fn sine_2d<T: Scalar>(rows: usize, cols: usize, width: usize) -> Result<Tensor<T>> {
    if width == 0 || !width.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2D position code needs a width divisible by 4, got {width}"
        )));
    }
    let half = width / 2;
    let row_bank = sine_1d::<T>(rows, half)?;
    let col_bank = sine_1d::<T>(cols, half)?;
    let mut data = Vec::with_capacity(rows * cols * width);
    for r in 0..rows {
        for c in 0..cols {
            data.extend_from_slice(row_bank.row(r));
            data.extend_from_slice(col_bank.row(c));
        }
    }
    Tensor::new(&[rows * cols, width], data)
}

pub fn sine_positional<T: Scalar>(kind: PositionKind, width: usize) -> Result<Tensor<T>> {
    match kind {
        PositionKind::Linear { len } => sine_1d(len, width),
        PositionKind::Grid { rows, cols } => sine_2d(rows, cols, width),
    }
}
