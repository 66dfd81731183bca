//! Small dense helpers: conjugate gradient and a semidefinite Cholesky.

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x||` at exit.
    pub residual: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive-definite `A` given as a
/// matrix-vector product, starting from zero. Stops after `max_iters` or once
/// the residual falls below `rel_tol * ||b||`.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], max_iters: usize, rel_tol: f64) -> CgResult
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = rel_tol * rr.sqrt();
    let mut it = 0;
    while it < max_iters && rr.sqrt() > target && rr > 0.0 {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        it += 1;
    }
    let ax = apply(&x);
    let residual = b
        .iter()
        .zip(&ax)
        .map(|(bi, ai)| (bi - ai) * (bi - ai))
        .sum::<f64>()
        .sqrt();
    CgResult {
        x,
        iterations: it,
        residual,
    }
}

/// Lower-triangular `L` with `L Lᵀ = A` for a symmetric positive-semidefinite
/// row-major `n × n` matrix. Pivots below `tol` times the largest diagonal
/// yield zero columns.
pub fn psd_cholesky(a: &[f64], n: usize, tol: f64) -> Vec<f64> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= tol * scale {
            continue;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_small_spd() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0];
        let b = [1.0, 2.0, 3.0];
        let mv = |v: &[f64]| (0..3).map(|i| dot(&a[i * 3..i * 3 + 3], v)).collect();
        let r = conjugate_gradient(mv, &b, 50, 1e-14);
        assert!(r.residual < 1e-12);
        assert!(r.iterations <= 3);
    }

    #[test]
    fn cholesky_reconstructs_and_tolerates_rank_deficiency() {
        // rank one: v vᵀ with v = (1, 2, 0)
        let a = [1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 0.0];
        let l = psd_cholesky(&a, 3, 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((s - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }
}
