//! Small dense helpers shared by the encoder and the integration heads.
//! Matrices are row-major flat `Vec<f64>`.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row vector times matrix: `out[j] = sum_i x[i] * m[i*cols + j]`.
pub(crate) fn vec_mat(x: &[f64], m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(m.len(), rows * cols);
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &m[i * cols..(i + 1) * cols];
        for (o, &mij) in out.iter_mut().zip(row) {
            *o += xi * mij;
        }
    }
    out
}

/// Matrix times column vector: `out[i] = sum_j m[i*cols + j] * v[j]`.
pub(crate) fn mat_vec(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(m.len(), rows * cols);
    let mut out = vec![0.0; rows];
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * cols..(i + 1) * cols], v);
    }
    out
}

/// Rank-one update: `acc[i*cols + j] += x[i] * y[j]`.
pub(crate) fn outer_add(acc: &mut [f64], x: &[f64], y: &[f64], rows: usize, cols: usize) {
    debug_assert_eq!(acc.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut acc[i * cols..(i + 1) * cols];
        for (r, &yj) in row.iter_mut().zip(y) {
            *r += xi * yj;
        }
    }
}

pub(crate) fn add_assign(acc: &mut [f64], x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub(crate) fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (o, &xi) in acc.iter_mut().zip(x) {
        *o += a * xi;
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Backward through softmax: given outputs `p` and upstream `dp`, returns
/// gradients on the logits.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(pi, di)| pi * di).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}
