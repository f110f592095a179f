//! Dense symmetric eigen-decomposition and singular values.

/// Eigenvalues of the symmetric `n x n` row-major matrix `a`, in descending order.
///
/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls below
/// `1e-14` of the total norm.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix must be {n}x{n}");
    let mut m = a.to_vec();
    let total: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if total == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// `AᵀA` for a row-major `rows x cols` matrix.
pub fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols, "matrix must be {rows}x{cols}");
    let mut g = vec![0.0; cols * cols];
    crate::autodiff::gemm(cols, rows, cols, a, (1, cols), a, (cols, 1), &mut g, 0.0);
    // Exact symmetry keeps the rotations well defined.
    for i in 0..cols {
        for j in i + 1..cols {
            let v = 0.5 * (g[i * cols + j] + g[j * cols + i]);
            g[i * cols + j] = v;
            g[j * cols + i] = v;
        }
    }
    g
}

/// Singular values of a row-major `rows x cols` matrix, descending, from the eigenvalues of `AᵀA`.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    symmetric_eigenvalues(&gram(a, rows, cols), cols).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}
