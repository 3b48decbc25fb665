//! Numerically stable primitives shared across modules.

use ndarray::{Array1, Array2, ArrayView1};

/// Log-sum-exp over a slice, shifted by the maximum to avoid overflow.
/// Returns `-inf` for an empty slice or when all entries are `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Two-argument log-sum-exp, the common case in lattice recurrences.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Row-wise log-softmax of a T x A matrix.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = logsumexp(row.as_slice().expect("row is contiguous"));
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Total variation along the time axis: sum of |x[t+1][j] - x[t][j]|.
pub fn total_variation(x: &Array2<f64>) -> f64 {
    let t = x.nrows();
    if t < 2 {
        return 0.0;
    }
    let mut tv = 0.0;
    for i in 0..t - 1 {
        for j in 0..x.ncols() {
            tv += (x[[i + 1, j]] - x[[i, j]]).abs();
        }
    }
    tv
}

/// Mean absolute error over all entries of two same-shaped matrices.
pub fn mean_abs_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    let n = (a.nrows() * a.ncols()) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Per-frame mean absolute error (mean over feature dims within each frame).
pub fn per_frame_mae(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    debug_assert_eq!(a.dim(), b.dim());
    let d = a.ncols() as f64;
    Array1::from_iter(
        a.rows()
            .into_iter()
            .zip(b.rows())
            .map(|(ra, rb)| ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / d),
    )
}
