//! Small dense linear-algebra helpers for verification suites.

/// Singular values of a row-major `rows x cols` matrix, descending.
///
/// One-sided Jacobi: rotate column pairs until mutually orthogonal, then the
/// singular values are the column norms. Working directly on the matrix (not
/// on AᵀA) keeps tiny singular values accurate to machine precision relative
/// to the largest one, which the low-rank routing checks rely on.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    // column-major working copy
    let mut m: Vec<f64> = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            m[j * rows + i] = a[i * cols + j];
        }
    }
    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let cp = m[p * rows + i];
                    let cq = m[q * rows + i];
                    alpha += cp * cp;
                    beta += cq * cq;
                    gamma += cp * cq;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let cp = m[p * rows + i];
                    let cq = m[q * rows + i];
                    m[p * rows + i] = c * cp - s * cq;
                    m[q * rows + i] = s * cp + c * cq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..cols)
        .map(|j| {
            m[j * rows..(j + 1) * rows]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sigma.sort_by(|x, y| y.partial_cmp(x).expect("finite singular values"));
    sigma
}

/// Least-squares fit of `y ~ a*x^2 + b*x + c` via 3x3 normal equations.
/// Returns `(a, b, c)`.
pub fn fit_quadratic(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 3, "need at least 3 points");
    let mut s = [0.0_f64; 5]; // sums of x^0..x^4
    let mut t = [0.0_f64; 3]; // sums of y*x^0..y*x^2
    for (&x, &y) in xs.iter().zip(ys) {
        let mut xp = 1.0;
        for k in 0..5 {
            s[k] += xp;
            if k < 3 {
                t[k] += y * xp;
            }
            xp *= x;
        }
    }
    // normal matrix rows for coefficients (a, b, c) of a*x^2+b*x+c
    let mut mat = [
        [s[4], s[3], s[2], t[2]],
        [s[3], s[2], s[1], t[1]],
        [s[2], s[1], s[0], t[0]],
    ];
    // gaussian elimination with partial pivoting
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| {
                mat[i][col]
                    .abs()
                    .partial_cmp(&mat[j][col].abs())
                    .expect("finite")
            })
            .expect("rows");
        mat.swap(col, pivot);
        let p = mat[col][col];
        for row in 0..3 {
            if row == col {
                continue;
            }
            let factor = mat[row][col] / p;
            for k in col..4 {
                mat[row][k] -= factor * mat[col][k];
            }
        }
    }
    (
        mat[0][3] / mat[0][0],
        mat[1][3] / mat[1][1],
        mat[2][3] / mat[2][2],
    )
}
