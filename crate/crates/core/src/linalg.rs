//! Small dense f64 helpers for the probe solvers. Matrices are row-major.

/// `XᵀX` for an `n × d` matrix.
pub fn gram(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    if n == 0 || d == 0 {
        return out;
    }
    // SAFETY: slices hold n·d and d·d elements; strides describe row-major
    // storage of Xᵀ (d × n) and X (n × d).
    unsafe {
        matrixmultiply::dgemm(
            d,
            n,
            d,
            1.0,
            x.as_ptr(),
            1,
            d as isize,
            x.as_ptr(),
            d as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            d as isize,
            1,
        );
    }
    out
}

/// `Xᵀv` for an `n × d` matrix.
pub fn xt_vec(x: &[f64], n: usize, d: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (row, &vi) in x.chunks_exact(d).zip(v).take(n) {
        for (o, &xij) in out.iter_mut().zip(row) {
            *o += xij * vi;
        }
    }
    out
}

/// `Xw` for an `n × d` matrix.
pub fn x_vec(x: &[f64], d: usize, w: &[f64]) -> Vec<f64> {
    x.chunks_exact(d).map(|row| dot(row, w)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite;

/// Solves `A x = b` for symmetric positive definite `A` (`d × d`), in place.
/// `a` is overwritten by its Cholesky factor and `b` by the solution.
pub fn cholesky_solve(a: &mut [f64], d: usize, b: &mut [f64]) -> Result<(), NotPositiveDefinite> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(NotPositiveDefinite);
        }
        let l_jj = diag.sqrt();
        a[j * d + j] = l_jj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l_jj;
        }
    }
    // L y = b
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * d + k] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    // Lᵀ x = y
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= a[k * d + i] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_matches_loops() {
        let (n, d) = (5, 3);
        let x: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = gram(&x, n, d);
        for i in 0..d {
            for j in 0..d {
                let expected: f64 = (0..n).map(|r| x[r * d + i] * x[r * d + j]).sum();
                assert!((g[i * d + j] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cholesky_solves_spd() {
        let mut a = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let orig = a.clone();
        let mut b = vec![1.0, 2.0, 3.0];
        cholesky_solve(&mut a, 3, &mut b).unwrap();
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| orig[i * 3 + j] * b[j]).sum();
            assert!((row - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let mut a = vec![1.0, 1.0, 1.0, 1.0];
        let mut b = vec![1.0, 1.0];
        assert_eq!(cholesky_solve(&mut a, 2, &mut b), Err(NotPositiveDefinite));
    }
}
