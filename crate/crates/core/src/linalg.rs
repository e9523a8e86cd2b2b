//! Small dense matrix helpers, row-major `f64` buffers.
//!
//! Everything here operates on matrices of at most a few dozen columns
//! (sufficient-statistic dimension, mixing layers, L-matrices), so the
//! classical algorithms below are both fast enough and easy to audit:
//! Householder QR for least squares, cyclic Jacobi for symmetric
//! eigenvalues, and singular values via the Gram matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::CounterRng;

/// C = A (m x k) * B (k x n), row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    // i-k-j loop order keeps the inner loop contiguous in both B and C.
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// y = A (m x n) * x (n).
pub fn matvec(a: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(x.len(), n);
    (0..m)
        .map(|i| {
            a[i * n..(i + 1) * n]
                .iter()
                .zip(x)
                .map(|(av, xv)| av * xv)
                .sum()
        })
        .collect()
}

/// Result of a QR least-squares solve.
pub struct Lstsq {
    /// Solution X, `cols x rhs_cols`, row-major.
    pub solution: Vec<f64>,
    /// Smallest |R_ii| / largest |R_ii|: a cheap rank indicator.
    pub rel_pivot: f64,
}

/// Minimize ||A X - B||_F by Householder QR. `a` is `rows x cols`
/// (`rows >= cols`), `b` is `rows x rhs_cols`. Returns `None` if a pivot
/// vanishes exactly (perfectly collinear columns).
pub fn lstsq(a: &[f64], b: &[f64], rows: usize, cols: usize, rhs_cols: usize) -> Option<Lstsq> {
    debug_assert!(rows >= cols);
    let mut r = a.to_vec();
    let mut qtb = b.to_vec();

    for j in 0..cols {
        // Householder vector for column j below the diagonal.
        let mut norm = 0.0;
        for i in j..rows {
            let v = r[i * cols + j];
            norm = math::hypot(norm, v);
        }
        if norm == 0.0 {
            return None;
        }
        let alpha = if r[j * cols + j] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; rows - j];
        v[0] = r[j * cols + j] - alpha;
        for i in j + 1..rows {
            v[i - j] = r[i * cols + j];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        r[j * cols + j] = alpha;
        for i in j + 1..rows {
            r[i * cols + j] = 0.0;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply reflection to remaining columns of R and to B.
        for col in j + 1..cols {
            let mut dot = 0.0;
            for i in j..rows {
                dot += v[i - j] * r[i * cols + col];
            }
            let scale = 2.0 * dot / vnorm2;
            for i in j..rows {
                r[i * cols + col] -= scale * v[i - j];
            }
        }
        for col in 0..rhs_cols {
            let mut dot = 0.0;
            for i in j..rows {
                dot += v[i - j] * qtb[i * rhs_cols + col];
            }
            let scale = 2.0 * dot / vnorm2;
            for i in j..rows {
                qtb[i * rhs_cols + col] -= scale * v[i - j];
            }
        }
    }

    let mut pivot_min = f64::INFINITY;
    let mut pivot_max = 0.0f64;
    for j in 0..cols {
        let p = math::abs(r[j * cols + j]);
        pivot_min = pivot_min.min(p);
        pivot_max = pivot_max.max(p);
    }
    if pivot_min == 0.0 {
        return None;
    }

    // Back-substitution, one rhs column at a time.
    let mut x = vec![0.0; cols * rhs_cols];
    for col in 0..rhs_cols {
        for j in (0..cols).rev() {
            let mut s = qtb[j * rhs_cols + col];
            for p in j + 1..cols {
                s -= r[j * cols + p] * x[p * rhs_cols + col];
            }
            x[j * rhs_cols + col] = s / r[j * cols + j];
        }
    }

    Some(Lstsq {
        solution: x,
        rel_pivot: pivot_min / pivot_max,
    })
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// returned in descending order.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        let scale: f64 = (0..n).map(|i| math::abs(m[i * n + i])).sum::<f64>() + 1e-300;
        if math::sqrt(off) < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + math::sqrt(1.0 + tau * tau))
                } else {
                    -1.0 / (-tau + math::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

/// Singular values of an arbitrary `rows x cols` matrix, descending.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // Work with the smaller Gram matrix.
    let (gram, n) = if cols <= rows {
        let at = transpose(a, rows, cols);
        (matmul(&at, a, cols, rows, cols), cols)
    } else {
        let at = transpose(a, rows, cols);
        (matmul(a, &at, rows, cols, rows), rows)
    };
    sym_eigenvalues(&gram, n)
        .into_iter()
        .map(|ev| math::sqrt(ev.max(0.0)))
        .collect()
}

/// sigma_max / sigma_min; infinite when the matrix is singular.
pub fn condition_number(a: &[f64], rows: usize, cols: usize) -> f64 {
    let sv = singular_values(a, rows, cols);
    let smax = sv[0];
    let smin = sv[sv.len() - 1];
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Haar-ish random orthogonal matrix: QR of a Gaussian matrix with the
/// R diagonal signs folded into Q.
pub fn random_orthogonal(n: usize, rng: &mut CounterRng) -> Vec<f64> {
    // Modified Gram-Schmidt is fine at these sizes.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.normal()).collect())
        .collect();
    for j in 0..n {
        for p in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
            let prev = cols[p].clone();
            for (cj, pv) in cols[j].iter_mut().zip(&prev) {
                *cj -= dot * pv;
            }
        }
        let norm = math::sqrt(cols[j].iter().map(|x| x * x).sum::<f64>());
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut q = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            q[i * n + j] = col[i];
        }
    }
    q
}
