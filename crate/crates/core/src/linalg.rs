//! Dense row-major helpers for small symmetric positive definite systems.

/// In-place lower Cholesky factor of the `n x n` matrix `a`; the strict upper
/// triangle is zeroed. Returns `false` when a pivot falls below `min_pivot`.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize, min_pivot: f64) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > min_pivot) {
            return false;
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

/// Solves `L z = b` for lower-triangular `L`.
pub(crate) fn forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&z[..i]).map(|(a, b)| a * b).sum();
        z[i] = (z[i] - s) / l[i * n + i];
    }
    z
}

/// Solves `L^T z = b` for lower-triangular `L`.
pub(crate) fn backward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    z
}

/// `(L L^T)^{-1}` as a full symmetric matrix.
pub(crate) fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // Rows of linv hold L^{-1}, computed column by column.
    let mut linv = vec![0.0; n * n];
    for j in 0..n {
        linv[j * n + j] = 1.0 / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = -s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..=a {
            let mut s = 0.0;
            for k in a..n {
                s += linv[k * n + a] * linv[k * n + b];
            }
            inv[a * n + b] = s;
            inv[b * n + a] = s;
        }
    }
    inv
}
