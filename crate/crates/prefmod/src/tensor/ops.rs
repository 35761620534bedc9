//! Raw f64 kernels shared by the tape's forward and backward passes.
//!
//! All matrices are row-major slices. The three matmul variants exist so the
//! backward pass never materializes a transpose.

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] @ b[k,n]^T  (rows of `b` are dotted with rows of `a`)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (l, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// Per-row standardization: zero mean, unit variance (epsilon-regularized).
/// Returns inv_std per row; `out` receives the normalized values.
pub fn layer_norm_rows(x: &[f64], rows: usize, cols: usize, eps: f64, out: &mut [f64]) -> Vec<f64> {
    let mut inv_stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            *o = (v - mean) * inv_std;
        }
        inv_stds.push(inv_std);
    }
    inv_stds
}

/// Token layout for patchify: token (py, px), dims ordered channel-major
/// (c, dy, dx). One pixel maps to exactly one token cell.
pub fn patchify(img: &[f64], c: usize, h: usize, w: usize, p: usize, out: &mut [f64]) {
    let gh = h / p;
    let gw = w / p;
    let dim = c * p * p;
    for py in 0..gh {
        for px in 0..gw {
            let t = py * gw + px;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ch * h * w + (py * p + dy) * w + (px * p + dx);
                        out[t * dim + ch * p * p + dy * p + dx] = img[src];
                    }
                }
            }
        }
    }
}

pub fn unpatchify(tokens: &[f64], c: usize, h: usize, w: usize, p: usize, out: &mut [f64]) {
    let gh = h / p;
    let gw = w / p;
    let dim = c * p * p;
    for py in 0..gh {
        for px in 0..gw {
            let t = py * gw + px;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let dst = ch * h * w + (py * p + dy) * w + (px * p + dx);
                        out[dst] = tokens[t * dim + ch * p * p + dy * p + dx];
                    }
                }
            }
        }
    }
}
