//! Dense generalized symmetric eigensolver used for coarse problems and
//! small reference solves. Reduces `A x = lambda M x` with M positive
//! definite to standard form through the Cholesky factor of M.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// All eigenpairs of the symmetric pencil `(A, M)`, eigenvalues ascending,
/// eigenvector columns M-orthonormal.
pub(crate) fn sym_generalized_eigen(
    a: &DMatrix<f64>,
    m: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(m.nrows(), n);
    assert_eq!(m.ncols(), n);
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }

    let chol = nalgebra::linalg::Cholesky::new(m.clone())
        .ok_or(Error::Factorization("mass matrix Cholesky"))?;
    let l = chol.l();

    // C = L^-1 A L^-T, symmetrized against roundoff drift.
    let s1 = l
        .solve_lower_triangular(a)
        .ok_or(Error::Factorization("lower-triangular solve"))?;
    let mut c = l
        .solve_lower_triangular(&s1.transpose())
        .ok_or(Error::Factorization("lower-triangular solve"))?;
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }

    let se = nalgebra::linalg::SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        se.eigenvalues[i]
            .partial_cmp(&se.eigenvalues[j])
            .expect("symmetric eigenvalues are finite")
    });

    let values: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let y: DVector<f64> = se.eigenvectors.column(src).into_owned();
        let x = l
            .tr_solve_lower_triangular(&y)
            .ok_or(Error::Factorization("transposed triangular solve"))?;
        // fix the sign deterministically: largest-magnitude entry positive
        let mut amax = 0.0;
        let mut sign = 1.0;
        for &xi in x.iter() {
            if xi.abs() > amax {
                amax = xi.abs();
                sign = if xi >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        vectors.column_mut(k).copy_from(&(x * sign));
    }
    Ok((values, vectors))
}

/// 2-norm condition number of a symmetric positive semidefinite matrix,
/// `f64::INFINITY` when the smallest eigenvalue is not positive.
pub(crate) fn spd_condition(g: &DMatrix<f64>) -> f64 {
    let se = nalgebra::linalg::SymmetricEigen::new(g.clone());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in se.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
