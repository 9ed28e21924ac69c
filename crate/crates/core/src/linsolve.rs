//! Linear algebra for the shifted systems `(A - alpha M) x = rhs`:
//! a matrix-free operator abstraction, conjugate gradients with explicit
//! indefiniteness detection, and a geometric V-cycle preconditioner built
//! from the level matrices and prolongations of a mesh hierarchy.

use crate::assembly::dot;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Square linear operator applied through matrix-vector products.
pub trait LinearOp {
    fn dim(&self) -> usize;
    /// Writes `self * x` into `y`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOp for SparseMatrix {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.nrows(), self.ncols());
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        SparseMatrix::apply(self, x, y);
    }
}

/// `(A - alpha M) v` without forming the shifted matrix.
pub fn shifted_apply(
    a: &SparseMatrix,
    m: &SparseMatrix,
    alpha: f64,
    v: &[f64],
) -> Result<Vec<f64>> {
    if a.nrows() != a.ncols() || m.nrows() != a.nrows() || m.ncols() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: m.nrows(),
        });
    }
    if v.len() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: v.len(),
        });
    }
    let mut y = a.mul_vec(v);
    let mv = m.mul_vec(v);
    for (yi, mi) in y.iter_mut().zip(&mv) {
        *yi -= alpha * mi;
    }
    Ok(y)
}

/// Explicit `A - alpha M`. Both matrices come from one assembly and share
/// their sparsity pattern, so the combination is a value-level operation.
pub fn shifted_matrix(a: &SparseMatrix, m: &SparseMatrix, alpha: f64) -> SparseMatrix {
    assert!(
        a.same_pattern(m),
        "stiffness and mass must share one sparsity pattern"
    );
    let mut s = a.clone();
    for (sv, mv) in s.values_mut().iter_mut().zip(m.values()) {
        *sv -= alpha * mv;
    }
    s
}

/// Outcome of one conjugate-gradient solve.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final true-residual norm relative to the right-hand side norm.
    pub relative_residual: f64,
    /// Operator applications, including the verification products.
    pub matvec_count: usize,
    /// Nonpositive curvature was met: the operator (or preconditioner) is
    /// not positive definite on the Krylov space.
    pub indefinite_detected: bool,
    pub converged: bool,
}

/// Preconditioned conjugate gradients from the zero start. Returns the best
/// iterate unconditionally; nonconvergence and indefiniteness show up in the
/// report, never as errors. Convergence means the true residual
/// `rhs - op x` drops to `tol * |rhs|`, re-verified against the recurrence
/// residual before accepting.
pub fn cg_solve(
    op: &dyn LinearOp,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
    precond: Option<&dyn LinearOp>,
) -> (Vec<f64>, SolveReport) {
    let n = op.dim();
    assert_eq!(rhs.len(), n, "right-hand side length must match the operator");
    if let Some(p) = precond {
        assert_eq!(p.dim(), n, "preconditioner dimension must match the operator");
    }

    let bnorm = dot(rhs, rhs).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return (
            x,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
                matvec_count: 0,
                indefinite_detected: false,
                converged: true,
            },
        );
    }

    let apply_precond = |r: &[f64], z: &mut Vec<f64>| match precond {
        Some(p) => p.apply(r, z),
        None => z.copy_from_slice(r),
    };

    let mut r = rhs.to_vec();
    let mut z = vec![0.0; n];
    apply_precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut matvec_count = 0usize;
    let mut iterations = 0usize;
    let mut indefinite = false;

    if rz <= 0.0 {
        indefinite = true;
    }

    while iterations < max_iter && !indefinite {
        op.apply(&p, &mut q);
        matvec_count += 1;
        iterations += 1;

        let pq = dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            indefinite = true;
            break;
        }
        let step = rz / pq;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * q[i];
        }

        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            // accept only a verified true residual; the recurrence may drift
            op.apply(&x, &mut q);
            matvec_count += 1;
            for i in 0..n {
                r[i] = rhs[i] - q[i];
            }
            let true_norm = dot(&r, &r).sqrt();
            if true_norm <= tol * bnorm {
                return (
                    x,
                    SolveReport {
                        iterations,
                        relative_residual: true_norm / bnorm,
                        matvec_count,
                        indefinite_detected: false,
                        converged: true,
                    },
                );
            }
            // restart the direction from the corrected residual
            apply_precond(&r, &mut z);
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
            if rz <= 0.0 {
                indefinite = true;
                break;
            }
            continue;
        }

        apply_precond(&r, &mut z);
        let rz_next = dot(&r, &z);
        if rz_next <= 0.0 || !rz_next.is_finite() {
            indefinite = true;
            break;
        }
        let beta = rz_next / rz;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_next;
    }

    let rnorm = dot(&r, &r).sqrt();
    (
        x,
        SolveReport {
            iterations,
            relative_residual: rnorm / bnorm,
            matvec_count,
            indefinite_detected: indefinite,
            converged: false,
        },
    )
}

/// Geometric V-cycle for a hierarchy of shifted level matrices: symmetric
/// Gauss-Seidel smoothing (2 sweeps before and after coarse correction),
/// residual restriction by the prolongation transpose, and a dense Cholesky
/// solve on the coarsest level. The smoother is self-adjoint in the operator
/// inner product, so the cycle is a symmetric preconditioner.
pub struct VCycle<'a> {
    /// Level matrices ordered coarse to fine; all must be positive definite
    /// for the cycle to behave as an SPD preconditioner.
    matrices: Vec<SparseMatrix>,
    /// prolongations[k] maps level k to level k+1.
    prolongations: &'a [SparseMatrix],
    diagonals: Vec<Vec<f64>>,
    coarse: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    sweeps: usize,
}

/// Builds the V-cycle preconditioner, factoring the coarsest matrix once.
/// Fails when the coarsest matrix is numerically indefinite or any smoother
/// diagonal is not positive.
pub fn vcycle_preconditioner<'a>(
    matrices: Vec<SparseMatrix>,
    prolongations: &'a [SparseMatrix],
) -> Result<VCycle<'a>> {
    assert!(!matrices.is_empty(), "at least one level is required");
    assert_eq!(
        prolongations.len(),
        matrices.len() - 1,
        "one prolongation per consecutive level pair"
    );
    for (k, p) in prolongations.iter().enumerate() {
        assert_eq!(p.ncols(), matrices[k].nrows(), "prolongation source dim, level {k}");
        assert_eq!(p.nrows(), matrices[k + 1].nrows(), "prolongation target dim, level {k}");
    }

    let mut diagonals = Vec::with_capacity(matrices.len());
    for a in &matrices {
        let d = a.diagonal();
        if d.iter().any(|&x| x <= 0.0) {
            return Err(Error::Factorization(
                "Gauss-Seidel smoothing requires positive diagonals",
            ));
        }
        diagonals.push(d);
    }

    let coarse = nalgebra::linalg::Cholesky::new(matrices[0].to_dense())
        .ok_or(Error::Factorization("coarsest-level Cholesky"))?;

    Ok(VCycle {
        matrices,
        prolongations,
        diagonals,
        coarse,
        sweeps: 2,
    })
}

impl VCycle<'_> {
    fn smooth(&self, lvl: usize, b: &[f64], x: &mut [f64]) {
        let a = &self.matrices[lvl];
        let d = &self.diagonals[lvl];
        let n = d.len();
        for i in 0..n {
            let (cols, vals) = a.row(i);
            let mut s = b[i];
            for (&j, &v) in cols.iter().zip(vals) {
                if j != i {
                    s -= v * x[j];
                }
            }
            x[i] = s / d[i];
        }
        for i in (0..n).rev() {
            let (cols, vals) = a.row(i);
            let mut s = b[i];
            for (&j, &v) in cols.iter().zip(vals) {
                if j != i {
                    s -= v * x[j];
                }
            }
            x[i] = s / d[i];
        }
    }

    fn cycle(&self, lvl: usize, b: &[f64], x: &mut [f64]) {
        if lvl == 0 {
            let sol = self.coarse.solve(&nalgebra::DVector::from_column_slice(b));
            x.copy_from_slice(sol.as_slice());
            return;
        }
        let a = &self.matrices[lvl];
        for _ in 0..self.sweeps {
            self.smooth(lvl, b, x);
        }
        let mut t = vec![0.0; b.len()];
        a.apply(x, &mut t);
        let r: Vec<f64> = b.iter().zip(&t).map(|(bi, ti)| bi - ti).collect();

        let p = &self.prolongations[lvl - 1];
        let rc = p.mul_vec_transpose(&r);
        let mut ec = vec![0.0; rc.len()];
        self.cycle(lvl - 1, &rc, &mut ec);
        let e = p.mul_vec(&ec);
        for (xi, ei) in x.iter_mut().zip(&e) {
            *xi += ei;
        }

        for _ in 0..self.sweeps {
            self.smooth(lvl, b, x);
        }
    }

    pub fn n_levels(&self) -> usize {
        self.matrices.len()
    }

    /// The finest-level matrix, usable as the CG operator alongside this
    /// cycle as its preconditioner.
    pub fn finest_matrix(&self) -> &SparseMatrix {
        self.matrices.last().expect("nonempty")
    }
}

impl LinearOp for VCycle<'_> {
    fn dim(&self) -> usize {
        self.matrices.last().expect("nonempty").nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        self.cycle(self.matrices.len() - 1, x, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble, ProblemDefinition};
    use crate::mesh::{build_hierarchy, generate_unit_square};
    use rand::{Rng, SeedableRng};

    fn tridiag(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn cg_solves_tridiagonal_to_tolerance() {
        let a = tridiag(50);
        let rhs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let (x, rep) = cg_solve(&a, &rhs, 1e-12, 200, None);
        assert!(rep.converged, "{rep:?}");
        assert!(!rep.indefinite_detected);
        assert!(rep.relative_residual <= 1e-12);
        let r = a.mul_vec(&x);
        let defect: f64 = r.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let bn: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(defect <= 1e-12 * bn);
        // one product per iteration plus the verification product
        assert_eq!(rep.matvec_count, rep.iterations + 1);
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let a = tridiag(10);
        let (x, rep) = cg_solve(&a, &vec![0.0; 10], 1e-10, 100, None);
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cg_flags_indefinite_operator() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        let (_, rep) = cg_solve(&a, &[0.0, 1.0], 1e-10, 50, None);
        assert!(rep.indefinite_detected);
        assert!(!rep.converged);
    }

    #[test]
    fn cg_reports_nonconvergence_within_budget() {
        let a = tridiag(100);
        let rhs = vec![1.0; 100];
        let (_, rep) = cg_solve(&a, &rhs, 1e-14, 3, None);
        assert!(!rep.converged);
        assert!(!rep.indefinite_detected);
        assert_eq!(rep.iterations, 3);
        assert!(rep.relative_residual > 1e-14);
    }

    #[test]
    fn shifted_matrix_matches_shifted_apply() {
        let mesh = generate_unit_square(8);
        let forms = assemble(&mesh, &ProblemDefinition::laplace()).unwrap();
        let alpha = 7.5;
        let s = shifted_matrix(&forms.stiffness, &forms.mass, alpha);
        let v: Vec<f64> = (0..forms.ndof()).map(|i| (i as f64).cos()).collect();
        let y1 = s.mul_vec(&v);
        let y2 = shifted_apply(&forms.stiffness, &forms.mass, alpha, &v).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-13);
        }
        assert_eq!(s.symmetry_defect(), 0.0);
    }

    fn laplace_level_matrices(n: usize, depth: usize, alpha: f64) -> (Vec<SparseMatrix>, Vec<SparseMatrix>) {
        let h = build_hierarchy(generate_unit_square(n), depth).unwrap();
        let problem = ProblemDefinition::laplace();
        let mats = h
            .levels
            .iter()
            .map(|m| {
                let f = assemble(m, &problem).unwrap();
                shifted_matrix(&f.stiffness, &f.mass, alpha)
            })
            .collect();
        (mats, h.prolongations)
    }

    #[test]
    fn single_level_cycle_is_the_direct_solve() {
        let (mats, _) = laplace_level_matrices(4, 1, 0.0);
        let a = mats[0].clone();
        let vc = vcycle_preconditioner(mats, &[]).unwrap();
        let rhs: Vec<f64> = (0..a.nrows()).map(|i| 1.0 + i as f64).collect();
        let mut x = vec![0.0; a.nrows()];
        vc.apply(&rhs, &mut x);
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip(&rhs) {
            assert!((ri - bi).abs() < 1e-10);
        }
    }

    #[test]
    fn vcycle_is_symmetric_and_positive() {
        let (mats, prol) = laplace_level_matrices(4, 3, 10.0);
        let n = mats.last().unwrap().nrows();
        let vc = vcycle_preconditioner(mats, &prol).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut bu = vec![0.0; n];
            let mut bv = vec![0.0; n];
            vc.apply(&u, &mut bu);
            vc.apply(&v, &mut bv);
            let ubv = dot(&u, &bv);
            let vbu = dot(&v, &bu);
            let scale = ubv.abs().max(vbu.abs()).max(1e-30);
            assert!((ubv - vbu).abs() <= 1e-10 * scale, "asymmetry {}", (ubv - vbu).abs() / scale);
            assert!(dot(&u, &bu) > 0.0);
        }
    }

    #[test]
    fn pcg_iteration_count_is_mesh_independent() {
        let mut counts = Vec::new();
        for depth in [2usize, 3, 4] {
            let (mats, prol) = laplace_level_matrices(8, depth, 0.0);
            let fine = mats.last().unwrap().clone();
            let n = fine.nrows();
            let vc = vcycle_preconditioner(mats, &prol).unwrap();
            let rhs: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
            let (x, rep) = cg_solve(&fine, &rhs, 1e-10, 200, Some(&vc));
            assert!(rep.converged, "depth {depth}: {rep:?}");
            counts.push(rep.iterations);
            let r = fine.mul_vec(&x);
            let defect: f64 = r.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let bn: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(defect <= 1e-9 * bn);
        }
        let max = *counts.iter().max().unwrap();
        assert!(max <= 25, "PCG iterations {counts:?} grow with depth");
        assert!(
            counts[2] <= 2 * counts[0].max(5),
            "iteration growth across depth: {counts:?}"
        );
    }

    #[test]
    fn indefinite_coarse_matrix_rejected_by_constructor() {
        // shift far above the spectrum makes every level indefinite
        let (mats, prol) = laplace_level_matrices(4, 2, 1e6);
        assert!(vcycle_preconditioner(mats, &prol).is_err());
    }

    #[test]
    fn pcg_with_vcycle_flags_indefinite_fine_matrix() {
        // 20.2 sits between the fine ground eigenvalue (about 19.93) and the
        // coarse one (about 20.51): the coarse factorization succeeds, the
        // fine matrix is indefinite, and CG must notice rather than converge
        let (mats, prol) = laplace_level_matrices(8, 2, 20.2);
        let fine = mats.last().unwrap().clone();
        let vc = vcycle_preconditioner(mats, &prol).unwrap();
        let n = fine.nrows();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let (_, rep) = cg_solve(&fine, &rhs, 1e-10, 500, Some(&vc));
        assert!(rep.indefinite_detected || !rep.converged, "{rep:?}");
    }
}
