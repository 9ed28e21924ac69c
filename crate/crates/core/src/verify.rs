//! Reference solutions and error measurement: direct discrete eigensolves
//! used to validate the multigrid iterates, eigenspace distances, analytic
//! error tables for the Dirichlet Laplacian on the unit square, Richardson
//! extrapolation, and a convergence-study driver producing one record per
//! (level, eigenvalue index).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::assembly::{dot, DiscreteForms, ProblemDefinition};
use crate::dense::sym_generalized_eigen;
use crate::eigensolve::{
    eigen_multigrid_multi_track, eigen_multigrid_track, rayleigh_quotient, EigenPair, EigenSet,
    FormsHierarchy, LevelTrace, ShiftConfig, SolverOptions, DEFAULT_DENSE_BUDGET,
};
use crate::error::{Error, Result};
use crate::linsolve::{cg_solve, vcycle_preconditioner};
use crate::mesh::{MeshHierarchy, TriangleMesh};
use crate::sparse::SparseMatrix;

/// Eigenvalues closer than this relative tolerance are treated as one
/// cluster when measuring eigenspace distances.
pub const DEGENERACY_REL_TOL: f64 = 1e-6;

/// Reference eigenpairs of one discrete level. Vectors are b-orthonormal
/// (unit mass norm), values ascend.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    /// 1-based hierarchy level.
    pub level: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// Operator applications spent by the iterative path; zero for the
    /// dense path.
    pub matvec_total: usize,
}

/// Budget and tolerance knobs for [`direct_discrete_solve`].
#[derive(Debug, Clone)]
pub struct DirectOptions {
    /// Largest dimension handled by a dense factorization.
    pub dense_budget: usize,
    /// Largest dimension attempted iteratively; above it the reference is
    /// reported as absent rather than computed.
    pub iterative_budget: usize,
    /// Acceptance threshold on `|A v - lambda M v| / |A v|`.
    pub residual_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Block inverse-iteration steps allowed.
    pub max_outer: usize,
    pub seed: u64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        DirectOptions {
            dense_budget: DEFAULT_DENSE_BUDGET,
            iterative_budget: 300_000,
            residual_tol: 1e-9,
            cg_tol: 1e-10,
            cg_max_iter: 10_000,
            max_outer: 200,
            seed: 42,
        }
    }
}

fn b_normalize(mass: &SparseMatrix, v: &mut [f64]) -> Result<f64> {
    let nrm = dot(v, &mass.mul_vec(v)).max(0.0).sqrt();
    if !(nrm > 1e-300) {
        return Err(Error::NonConvergence(
            "vector collapsed to zero mass norm".into(),
        ));
    }
    for x in v.iter_mut() {
        *x /= nrm;
    }
    Ok(nrm)
}

/// Removes the components along b-orthonormal `basis` vectors; two passes
/// keep the result orthogonal to working precision.
fn b_orthogonalize(v: &mut [f64], basis: &[Vec<f64>], mass_images: &[Vec<f64>]) {
    for _ in 0..2 {
        for (u, mu) in basis.iter().zip(mass_images) {
            let c = dot(mu, v);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= c * ui;
            }
        }
    }
}

/// The `count` smallest eigenpairs of level `level_idx`, computed
/// independently of the multigrid scheme: densely when the dimension fits
/// `dense_budget`, otherwise by block inverse iteration with Rayleigh-Ritz
/// extraction (inner solves are conjugate gradients preconditioned by a
/// V-cycle of the stiffness matrix). Dimensions beyond `iterative_budget`
/// return `None`: no reference rather than an unreliable one.
pub fn direct_discrete_solve(
    fh: &FormsHierarchy,
    level_idx: usize,
    count: usize,
    opts: &DirectOptions,
) -> Result<Option<EigenBasis>> {
    let forms = &fh.levels[level_idx];
    let n = forms.ndof();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "requested {count} reference eigenpairs from a {n}-dimensional level"
        )));
    }
    if n <= opts.dense_budget {
        let (values, vectors) = sym_generalized_eigen(
            &forms.stiffness.to_dense(),
            &forms.mass.to_dense(),
        )?;
        return Ok(Some(EigenBasis {
            level: forms.level,
            values: values[..count].to_vec(),
            vectors: (0..count)
                .map(|k| vectors.column(k).iter().copied().collect())
                .collect(),
            matvec_total: 0,
        }));
    }
    if n > opts.iterative_budget {
        return Ok(None);
    }
    iterative_smallest(fh, level_idx, count, opts).map(Some)
}

fn iterative_smallest(
    fh: &FormsHierarchy,
    level_idx: usize,
    count: usize,
    opts: &DirectOptions,
) -> Result<EigenBasis> {
    let forms = &fh.levels[level_idx];
    let n = forms.ndof();
    let stiff = &forms.stiffness;
    let mass = &forms.mass;
    let matrices: Vec<SparseMatrix> = fh.levels[..=level_idx]
        .iter()
        .map(|f| f.stiffness.clone())
        .collect();
    let vc = vcycle_preconditioner(matrices, &fh.prolongations[..level_idx])?;

    // The block carries two cushion directions past the requested pairs. A
    // single vector inside a near-degenerate cluster contracts at the rate
    // of the intra-cluster gap, which for discrete doubles of a symmetric
    // domain sits arbitrarily close to one; a block spanning the cluster
    // contracts at the gap to the first excluded eigenvalue and the
    // Rayleigh-Ritz rotation separates the cluster algebraically.
    let block = (count + 2).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(block);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(block);
    for _ in 0..block {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b_orthogonalize(&mut v, &basis, &images);
        b_normalize(mass, &mut v)?;
        images.push(mass.mul_vec(&v));
        basis.push(v);
    }

    let mut matvec_total = 0usize;
    let mut values = vec![0.0; block];
    let mut worst = f64::INFINITY;
    let mut converged = false;
    for _ in 0..opts.max_outer {
        // one inverse power step per column; the mass images double as the
        // right-hand sides
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(block);
        let mut next_images: Vec<Vec<f64>> = Vec::with_capacity(block);
        for rhs in &images {
            let (mut y, rep) = cg_solve(stiff, rhs, opts.cg_tol, opts.cg_max_iter, Some(&vc));
            matvec_total += rep.matvec_count;
            b_orthogonalize(&mut y, &next, &next_images);
            b_normalize(mass, &mut y)?;
            next_images.push(mass.mul_vec(&y));
            next.push(y);
        }
        let applied: Vec<Vec<f64>> = next.iter().map(|y| stiff.mul_vec(y)).collect();
        matvec_total += 2 * block;
        let mut ga = nalgebra::DMatrix::zeros(block, block);
        let mut gm = nalgebra::DMatrix::zeros(block, block);
        for i in 0..block {
            for j in i..block {
                let a_ij = dot(&next[i], &applied[j]);
                let m_ij = dot(&next[i], &next_images[j]);
                ga[(i, j)] = a_ij;
                ga[(j, i)] = a_ij;
                gm[(i, j)] = m_ij;
                gm[(j, i)] = m_ij;
            }
        }
        let (ritz, s) = sym_generalized_eigen(&ga, &gm)?;
        // rotating the solutions, their stiffness images and their mass
        // images by the same coefficients keeps all three consistent, so
        // the residuals come without further operator applications
        let rotate = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..block)
                .map(|c| {
                    let mut out = vec![0.0; n];
                    for (r, col) in cols.iter().enumerate() {
                        let w = s[(r, c)];
                        for (o, x) in out.iter_mut().zip(col) {
                            *o += w * x;
                        }
                    }
                    out
                })
                .collect()
        };
        basis = rotate(&next);
        images = rotate(&next_images);
        let rotated_applied = rotate(&applied);
        values = ritz;

        worst = (0..count)
            .map(|c| {
                let res: f64 = rotated_applied[c]
                    .iter()
                    .zip(&images[c])
                    .map(|(a, m)| (a - values[c] * m).powi(2))
                    .sum::<f64>()
                    .sqrt();
                res / dot(&rotated_applied[c], &rotated_applied[c])
                    .sqrt()
                    .max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max);
        if worst <= opts.residual_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "reference eigenpairs on level {} stalled at residual {:.1e} (target {:.1e}) within {} iterations",
            forms.level, worst, opts.residual_tol, opts.max_outer
        )));
    }
    basis.truncate(count);
    values.truncate(count);
    Ok(EigenBasis {
        level: forms.level,
        values,
        vectors: basis,
        matvec_total,
    })
}

/// Energy-norm distance from the direction of `v` to the span of `basis`:
/// `|v/|v|_a - P v/|v|_a|_a` with `P` the a-orthogonal projector onto the
/// span. Zero means `v` lies in the span, one means a-orthogonal to it.
pub fn eigenspace_distance(
    forms: &DiscreteForms,
    v: &[f64],
    basis: &[Vec<f64>],
) -> Result<f64> {
    if basis.is_empty() {
        return Err(Error::InvalidArgument(
            "eigenspace distance needs at least one reference vector".into(),
        ));
    }
    let n = forms.ndof();
    if v.len() != n || basis.iter().any(|b| b.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let m = basis.len();
    let applied: Vec<Vec<f64>> = basis.iter().map(|b| forms.stiffness.mul_vec(b)).collect();
    let mut gram = nalgebra::DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let g = dot(&basis[i], &applied[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let va = dot(v, &forms.stiffness.mul_vec(v));
    if !(va > 0.0) {
        return Err(Error::InvalidArgument(
            "eigenspace distance of a zero vector".into(),
        ));
    }
    let r = nalgebra::DVector::from_iterator(m, applied.iter().map(|av| dot(av, v)));
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or(Error::Factorization("eigenspace Gram matrix"))?;
    let c = chol.solve(&r);
    let projected = r.dot(&c) / va;
    Ok((1.0 - projected).clamp(0.0, 1.0).sqrt())
}

/// Groups consecutive indices of ascending `values` whose gaps fall below
/// `rel_tol` times the eigenvalue magnitude.
pub fn cluster_partition(values: &[f64], rel_tol: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..values.len() {
        let joins = i > 0 && {
            let scale = values[i].abs().max(1.0);
            (values[i] - values[i - 1]).abs() <= rel_tol * scale
        };
        if joins {
            clusters.last_mut().expect("nonempty on join").push(i);
        } else {
            clusters.push(vec![i]);
        }
    }
    clusters
}

/// Richardson extrapolation of two values computed at mesh sizes `h` and
/// `h/2` for a method of the given order: `(2^p f(h/2) - f(h)) / (2^p - 1)`.
pub fn richardson_reference(coarse: f64, fine: f64, order: u32) -> f64 {
    let w = (2.0f64).powi(order as i32);
    (w * fine - coarse) / (w - 1.0)
}

/// Dirichlet eigenvalues of the unit square for the constant-coefficient
/// problem: `(p^2 + q^2) pi^2`, ascending, lowest six.
pub fn exact_laplace_eigenvalues(count: usize) -> Result<Vec<f64>> {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let table = [2.0, 5.0, 5.0, 8.0, 10.0, 10.0];
    if count > table.len() {
        return Err(Error::InvalidArgument(format!(
            "analytic eigenvalue table covers {} entries, {count} requested",
            table.len()
        )));
    }
    Ok(table[..count].iter().map(|t| t * pi2).collect())
}

/// Mode pairs (p, q) of the analytic eigenfunctions `2 sin(p pi x)
/// sin(q pi y)`, grouped by eigenvalue: indices 2 and 3 (and 5 and 6) share
/// a two-dimensional eigenspace.
const LAPLACE_MODES: [&[(u32, u32)]; 6] = [
    &[(1, 1)],
    &[(1, 2), (2, 1)],
    &[(1, 2), (2, 1)],
    &[(2, 2)],
    &[(1, 3), (3, 1)],
    &[(1, 3), (3, 1)],
];

/// Six-point triangle quadrature, exact through polynomial degree four.
/// Entries are (barycentric coordinates, weight); weights sum to one.
const TRI_QUADRATURE_D4: [([f64; 3], f64); 6] = [
    (
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        0.223381589678011,
    ),
    (
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        0.223381589678011,
    ),
    (
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        0.223381589678011,
    ),
    (
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        0.109951743655322,
    ),
    (
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        0.109951743655322,
    ),
    (
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
        0.109951743655322,
    ),
];

/// Gradient of the b-normalized analytic mode `2 sin(p pi x) sin(q pi y)`.
fn laplace_mode_gradient(p: u32, q: u32, x: f64, y: f64) -> [f64; 2] {
    let pi = std::f64::consts::PI;
    let (pp, qq) = (p as f64 * pi, q as f64 * pi);
    [
        2.0 * p as f64 * pi * (pp * x).cos() * (qq * y).sin(),
        2.0 * q as f64 * pi * (pp * x).sin() * (qq * y).cos(),
    ]
}

/// Stiffness cross term `a(u_h, u_mode)` for a P1 function given by nodal
/// values on the free unknowns, integrated triangle by triangle with the
/// degree-four rule. The P1 gradient is constant per triangle, so only the
/// mode gradient is sampled.
fn analytic_stiffness_cross(
    mesh: &TriangleMesh,
    forms: &DiscreteForms,
    coeffs: &[f64],
    p: u32,
    q: u32,
) -> f64 {
    let nodal = |vertex: usize| -> f64 {
        forms.free_of_vertex[vertex]
            .map(|f| coeffs[f])
            .unwrap_or(0.0)
    };
    let mut total = 0.0;
    for t in 0..mesh.n_triangles() {
        let [ia, ib, ic] = mesh.triangles[t];
        let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
        let (d1x, d1y) = (b[0] - a[0], b[1] - a[1]);
        let (d2x, d2y) = (c[0] - a[0], c[1] - a[1]);
        let det = d1x * d2y - d1y * d2x;
        let gb = [d2y / det, -d2x / det];
        let gc = [-d1y / det, d1x / det];
        let ga = [-gb[0] - gc[0], -gb[1] - gc[1]];
        let (ca, cb, cc) = (nodal(ia), nodal(ib), nodal(ic));
        let grad_h = [
            ca * ga[0] + cb * gb[0] + cc * gc[0],
            ca * ga[1] + cb * gb[1] + cc * gc[1],
        ];
        let area = 0.5 * det;
        let mut mode_avg = [0.0, 0.0];
        for (bary, w) in &TRI_QUADRATURE_D4 {
            let x = bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0];
            let y = bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1];
            let g = laplace_mode_gradient(p, q, x, y);
            mode_avg[0] += w * g[0];
            mode_avg[1] += w * g[1];
        }
        total += area * (grad_h[0] * mode_avg[0] + grad_h[1] * mode_avg[1]);
    }
    total
}

/// Per-pair exact errors against the analytic Dirichlet eigenfunctions of
/// the unit square: `(lambda_h - lambda, |u_h - P u_h|_a)` with `P` the
/// a-orthogonal projection onto the analytic eigenspace of the matching
/// index and `u_h` scaled to unit mass norm. Valid for the
/// constant-coefficient problem only; covers the lowest six pairs.
pub fn laplace_exact_errors(
    mesh: &TriangleMesh,
    forms: &DiscreteForms,
    pairs: &[EigenPair],
) -> Result<Vec<(f64, f64)>> {
    if pairs.len() > LAPLACE_MODES.len() {
        return Err(Error::InvalidArgument(format!(
            "analytic reference covers the lowest {} eigenpairs, got {}",
            LAPLACE_MODES.len(),
            pairs.len()
        )));
    }
    let exact = exact_laplace_eigenvalues(pairs.len())?;
    let mut out = Vec::with_capacity(pairs.len());
    for (j, pair) in pairs.iter().enumerate() {
        if pair.coeffs.len() != forms.ndof() {
            return Err(Error::DimensionMismatch {
                expected: forms.ndof(),
                got: pair.coeffs.len(),
            });
        }
        let mut c = pair.coeffs.clone();
        b_normalize(&forms.mass, &mut c)?;
        let lambda_h = rayleigh_quotient(forms, &c)?;
        // within the analytic eigenspace a(., .) = lambda b(., .) and the
        // modes are b-orthonormal, so the a-Gram matrix is lambda times the
        // identity and projection needs only the cross terms
        let mut projected = 0.0;
        for &(p, q) in LAPLACE_MODES[j] {
            let r = analytic_stiffness_cross(mesh, forms, &c, p, q);
            projected += r * r / exact[j];
        }
        let err_energy = (lambda_h - projected).max(0.0).sqrt();
        out.push((pair.lambda - exact[j], err_energy));
    }
    Ok(out)
}

/// One row of a convergence study: the multigrid value for eigenvalue `j`
/// on one level next to its references. Absent references (for example a
/// level too large for the direct solver) stay `None`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConvergenceRecord {
    /// 1-based hierarchy level.
    pub level: usize,
    pub ndof: usize,
    /// 1-based eigenvalue index.
    pub j: usize,
    pub lambda_mg: f64,
    /// Direct discrete eigenvalue of the same level.
    pub lambda_dir: Option<f64>,
    /// `lambda_mg` minus the analytic eigenvalue (constant-coefficient
    /// problem) or minus a Richardson extrapolation of the two finest
    /// direct values (other problems).
    pub err_lambda_exact: Option<f64>,
    /// Energy-norm distance to the analytic eigenspace; constant-
    /// coefficient problem only.
    pub err_energy: Option<f64>,
    /// Measured one-step contraction: eigenspace distance of the corrected
    /// iterate over the distance of the carried-up previous iterate, both
    /// against this level's direct eigenspace.
    pub theta_measured: Option<f64>,
    /// Shift used on this level (last inner step); zero on the coarse level.
    pub alpha: f64,
    /// Operator applications this level spent on index `j`.
    pub matvec_total: usize,
    pub wall_seconds: f64,
}

/// Knobs for [`convergence_study`].
#[derive(Debug, Clone)]
pub struct StudyOptions {
    /// Number of tracked eigenpairs.
    pub nev: usize,
    pub shift: ShiftConfig,
    pub solver: SolverOptions,
    pub direct: DirectOptions,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            nev: 1,
            shift: ShiftConfig::default(),
            solver: SolverOptions::default(),
            direct: DirectOptions::default(),
        }
    }
}

/// Runs the multigrid scheme over the whole hierarchy and lines its
/// per-level eigenvalues up against direct discrete solves and exact or
/// extrapolated references. Returns `nev` records per level, ordered by
/// level then index.
pub fn convergence_study(
    hierarchy: &MeshHierarchy,
    problem: &ProblemDefinition,
    opts: &StudyOptions,
) -> Result<Vec<ConvergenceRecord>> {
    let fh = FormsHierarchy::assemble(hierarchy, problem)?;
    let n_levels = fh.n_levels();
    let (sets, traces): (Vec<EigenSet>, Vec<LevelTrace>) = if opts.nev == 1 {
        let (pairs, traces) = eigen_multigrid_track(&fh, &opts.shift, &opts.solver)?;
        (
            pairs
                .into_iter()
                .map(|p| EigenSet {
                    level: p.level,
                    pairs: vec![p],
                })
                .collect(),
            traces,
        )
    } else {
        eigen_multigrid_multi_track(&fh, opts.nev, &opts.shift, &opts.solver)?
    };

    let mut references: Vec<Option<EigenBasis>> = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let count = opts.nev.min(fh.levels[k].ndof());
        references.push(direct_discrete_solve(&fh, k, count, &opts.direct)?);
        log::info!(
            "level {}: direct reference {}",
            k + 1,
            if references[k].is_some() {
                "computed"
            } else {
                "absent (dimension beyond budget)"
            }
        );
    }

    let analytic = problem.name == "laplace" && opts.nev <= LAPLACE_MODES.len();
    // for problems without an analytic table, extrapolate each index from
    // the two finest levels holding direct values
    let richardson: Option<Vec<f64>> = if analytic {
        None
    } else {
        let present: Vec<usize> = (0..n_levels).filter(|&k| references[k].is_some()).collect();
        if present.len() >= 2 && n_levels >= 2 {
            let (kc, kf) = (present[present.len() - 2], present[present.len() - 1]);
            if kf == kc + 1 {
                let vc = &references[kc].as_ref().unwrap().values;
                let vf = &references[kf].as_ref().unwrap().values;
                Some(
                    (0..opts.nev.min(vc.len()).min(vf.len()))
                        .map(|j| richardson_reference(vc[j], vf[j], 2))
                        .collect(),
                )
            } else {
                None
            }
        } else {
            None
        }
    };

    let mut records = Vec::with_capacity(n_levels * opts.nev);
    for k in 0..n_levels {
        let forms = &fh.levels[k];
        let set = &sets[k];
        let exact = if analytic {
            Some(laplace_exact_errors(
                &hierarchy.levels[k],
                forms,
                &set.pairs,
            )?)
        } else {
            None
        };
        let clusters = references[k]
            .as_ref()
            .map(|basis| cluster_partition(&basis.values, DEGENERACY_REL_TOL));

        for j in 0..set.pairs.len() {
            let pair = &set.pairs[j];
            let lambda_dir = references[k].as_ref().and_then(|b| b.values.get(j).copied());
            let theta_measured = if k > 0 {
                measure_theta(&fh, k, j, set, &sets[k - 1], references[k].as_ref(), clusters.as_ref())?
            } else {
                None
            };
            let err_lambda_exact = match (&exact, &richardson) {
                (Some(table), _) => Some(table[j].0),
                (None, Some(refs)) => refs.get(j).map(|r| pair.lambda - r),
                _ => None,
            };
            let err_energy = exact.as_ref().map(|table| table[j].1);
            let level_traces = traces
                .iter()
                .filter(|t| t.level == forms.level && t.j == j + 1);
            let alpha = level_traces
                .clone()
                .last()
                .map(|t| t.alpha)
                .unwrap_or(0.0);
            let matvec_total: usize = level_traces.clone().map(|t| t.matvec_total).sum();
            // an empty sum of floats is -0.0; keep the zero unsigned
            let wall_seconds: f64 = level_traces.map(|t| t.wall_seconds).sum::<f64>().max(0.0);
            records.push(ConvergenceRecord {
                level: forms.level,
                ndof: forms.ndof(),
                j: j + 1,
                lambda_mg: pair.lambda,
                lambda_dir,
                err_lambda_exact,
                err_energy,
                theta_measured,
                alpha,
                matvec_total,
                wall_seconds,
            });
        }
    }
    Ok(records)
}

/// Contraction of the eigenspace distance across one correction step for
/// index `j` (0-based): distance of the corrected iterate over distance of
/// the prolongated previous iterate, both measured against the direct
/// eigenspace cluster containing `j` on the fine level.
fn measure_theta(
    fh: &FormsHierarchy,
    k: usize,
    j: usize,
    set: &EigenSet,
    prev_set: &EigenSet,
    basis: Option<&EigenBasis>,
    clusters: Option<&Vec<Vec<usize>>>,
) -> Result<Option<f64>> {
    let (Some(basis), Some(clusters)) = (basis, clusters) else {
        return Ok(None);
    };
    let Some(cluster) = clusters.iter().find(|c| c.contains(&j)) else {
        return Ok(None);
    };
    let span: Vec<Vec<f64>> = cluster
        .iter()
        .filter_map(|&i| basis.vectors.get(i).cloned())
        .collect();
    if span.len() != cluster.len() {
        return Ok(None);
    }
    let forms = &fh.levels[k];
    let (Some(pair), Some(prev)) = (set.pairs.get(j), prev_set.pairs.get(j)) else {
        return Ok(None);
    };
    let lifted = fh.prolongations[k - 1].mul_vec(&prev.coeffs);
    let d_prev = eigenspace_distance(forms, &lifted, &span)?;
    let d_now = eigenspace_distance(forms, &pair.coeffs, &span)?;
    if d_prev <= 1e-14 {
        return Ok(None);
    }
    Ok(Some(d_now / d_prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble, b_inner};
    use crate::eigensolve::coarse_eigensolve;
    use crate::mesh::{build_hierarchy, generate_unit_square};

    fn laplace_hierarchy(n: usize, depth: usize) -> (MeshHierarchy, FormsHierarchy) {
        let h = build_hierarchy(generate_unit_square(n), depth).unwrap();
        let fh = FormsHierarchy::assemble(&h, &ProblemDefinition::laplace()).unwrap();
        (h, fh)
    }

    #[test]
    fn richardson_eliminates_the_quadratic_term() {
        let (limit, c) = (7.3, 2.1);
        let coarse = limit + c;
        let fine = limit + c / 4.0;
        assert!((richardson_reference(coarse, fine, 2) - limit).abs() < 1e-13);
        // first-order data needs the matching weight
        let fine1 = limit + c / 2.0;
        assert!((richardson_reference(coarse, fine1, 1) - limit).abs() < 1e-13);
    }

    #[test]
    fn quadrature_rule_is_exact_through_degree_four() {
        // reference triangle (0,0), (1,0), (0,1): integrate with the rule
        // and compare against closed forms
        let integrate = |f: &dyn Fn(f64, f64) -> f64| -> f64 {
            let verts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
            let area = 0.5;
            TRI_QUADRATURE_D4
                .iter()
                .map(|(bary, w)| {
                    let x = bary[0] * verts[0].0 + bary[1] * verts[1].0 + bary[2] * verts[2].0;
                    let y = bary[0] * verts[0].1 + bary[1] * verts[1].1 + bary[2] * verts[2].1;
                    w * area * f(x, y)
                })
                .sum()
        };
        assert!((integrate(&|_, _| 1.0) - 0.5).abs() < 1e-15);
        assert!((integrate(&|x, _| x) - 1.0 / 6.0).abs() < 1e-15);
        assert!((integrate(&|x, y| x * y) - 1.0 / 24.0).abs() < 1e-15);
        assert!((integrate(&|x, y| x * x * y * y) - 1.0 / 180.0).abs() < 1e-15);
        assert!((integrate(&|x, _| x.powi(4)) - 1.0 / 30.0).abs() < 1e-15);
        assert!((integrate(&|x, y| x.powi(3) * y) - 1.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn eigenspace_distance_on_a_diagonal_pencil() {
        let stiff: Vec<(usize, usize, f64)> =
            vec![(0, 0, 1.0), (1, 1, 4.0), (2, 2, 9.0)];
        let mass: Vec<(usize, usize, f64)> = (0..3).map(|i| (i, i, 1.0)).collect();
        let forms = DiscreteForms {
            stiffness: SparseMatrix::from_triplets(3, 3, &stiff).unwrap(),
            mass: SparseMatrix::from_triplets(3, 3, &mass).unwrap(),
            free_of_vertex: (0..3).map(Some).collect(),
            vertex_of_free: (0..3).collect(),
            level: 1,
        };
        let e1 = vec![1.0, 0.0, 0.0];
        let basis = vec![e1.clone()];
        assert!(eigenspace_distance(&forms, &e1, &basis).unwrap() < 1e-14);
        let e2 = vec![0.0, 1.0, 0.0];
        assert!((eigenspace_distance(&forms, &e2, &basis).unwrap() - 1.0).abs() < 1e-14);
        // v = e1 + e2 has |v|_a^2 = 5, projection onto e1 captures 1/5
        let v = vec![1.0, 1.0, 0.0];
        let d = eigenspace_distance(&forms, &v, &basis).unwrap();
        assert!((d - (4.0f64 / 5.0).sqrt()).abs() < 1e-14);
        // span of both coordinate directions contains v
        let two = vec![e1, e2];
        assert!(eigenspace_distance(&forms, &v, &two).unwrap() < 1e-14);
    }

    #[test]
    fn direct_dense_matches_frozen_values() {
        let (_, fh) = laplace_hierarchy(8, 1);
        let basis = direct_discrete_solve(&fh, 0, 2, &DirectOptions::default())
            .unwrap()
            .expect("49 unknowns fit the dense budget");
        assert!((basis.values[0] - 20.5055448977079).abs() < 1e-10 * 20.5);
        assert!((basis.values[1] - 52.6297923115755).abs() < 1e-10 * 52.6);
        assert_eq!(basis.matvec_total, 0);
        let forms = &fh.levels[0];
        for i in 0..2 {
            for j in 0..=i {
                let b = b_inner(forms, &basis.vectors[i], &basis.vectors[j]).unwrap();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((b - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn direct_iterative_matches_dense() {
        let (_, fh) = laplace_hierarchy(8, 2);
        let dense = direct_discrete_solve(&fh, 1, 3, &DirectOptions::default())
            .unwrap()
            .unwrap();
        let forced = DirectOptions {
            dense_budget: 10,
            ..DirectOptions::default()
        };
        let iterative = direct_discrete_solve(&fh, 1, 3, &forced).unwrap().unwrap();
        assert!(iterative.matvec_total > 0);
        let forms = &fh.levels[1];
        for j in 0..3 {
            let rel = (iterative.values[j] - dense.values[j]).abs() / dense.values[j];
            assert!(rel < 1e-8, "value {j}: relative deviation {rel:.2e}");
            // each iterative vector lies in the dense eigenspace of its
            // cluster
            let clusters = cluster_partition(&dense.values, DEGENERACY_REL_TOL);
            let cluster = clusters.iter().find(|c| c.contains(&j)).unwrap();
            let span: Vec<Vec<f64>> = cluster
                .iter()
                .map(|&i| dense.vectors[i].clone())
                .collect();
            let d = eigenspace_distance(forms, &iterative.vectors[j], &span).unwrap();
            assert!(d < 1e-5, "vector {j}: distance {d:.2e}");
        }
        for i in 0..3 {
            for j in 0..=i {
                let b = b_inner(forms, &iterative.vectors[i], &iterative.vectors[j]).unwrap();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((b - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn direct_solve_absent_beyond_budgets() {
        let (_, fh) = laplace_hierarchy(8, 2);
        let opts = DirectOptions {
            dense_budget: 10,
            iterative_budget: 20,
            ..DirectOptions::default()
        };
        assert!(direct_discrete_solve(&fh, 1, 1, &opts).unwrap().is_none());
        assert!(direct_discrete_solve(&fh, 1, 0, &opts).is_err());
    }

    #[test]
    fn exact_error_table_shrinks_at_the_expected_rates() {
        let problem = ProblemDefinition::laplace();
        let h = build_hierarchy(generate_unit_square(16), 2).unwrap();
        let mut errs = Vec::new();
        for k in 0..2 {
            let forms = assemble(&h.levels[k], &problem).unwrap();
            let set = coarse_eigensolve(&forms, 6).unwrap();
            errs.push(laplace_exact_errors(&h.levels[k], &forms, &set.pairs).unwrap());
        }
        for j in 0..6 {
            let (c_val, c_energy) = errs[0][j];
            let (f_val, f_energy) = errs[1][j];
            assert!(c_val > 0.0 && f_val > 0.0, "min-max bound violated at {j}");
            let ratio = c_val / f_val;
            assert!(
                (3.5..4.6).contains(&ratio),
                "index {j}: eigenvalue error ratio {ratio}"
            );
            let energy_ratio = c_energy / f_energy;
            assert!(
                (1.7..2.4).contains(&energy_ratio),
                "index {j}: energy error ratio {energy_ratio}"
            );
        }
        // frozen check of the lowest eigenvalue error on the 16x16 grid
        assert!((errs[0][0].0 - (19.9297898422175 - 19.739208802178716)).abs() < 1e-10);
    }

    #[test]
    fn cluster_partition_groups_near_degenerate_values() {
        let values = [1.0, 1.0 + 1e-9, 2.0, 2.0000001, 3.0];
        let clusters = cluster_partition(&values, 1e-6);
        assert_eq!(clusters, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(cluster_partition(&[], 1e-6), Vec::<Vec<usize>>::new());
    }

    #[test]
    fn study_on_the_constant_coefficient_problem() {
        let h = build_hierarchy(generate_unit_square(8), 3).unwrap();
        let opts = StudyOptions::default();
        let records =
            convergence_study(&h, &ProblemDefinition::laplace(), &opts).unwrap();
        assert_eq!(records.len(), 3);
        let exact = exact_laplace_eigenvalues(1).unwrap()[0];
        for (k, r) in records.iter().enumerate() {
            assert_eq!(r.level, k + 1);
            assert_eq!(r.j, 1);
            let dir = r.lambda_dir.expect("all levels fit the dense budget");
            // one correction step leaves the iteration error well under
            // half the discretization error
            assert!(
                (r.lambda_mg - dir).abs() <= 0.5 * (dir - exact),
                "level {}: multigrid {} vs direct {}",
                r.level,
                r.lambda_mg,
                dir
            );
            assert!(r.err_lambda_exact.unwrap() > 0.0);
            assert!(r.err_energy.unwrap() > 0.0);
        }
        // quadratic eigenvalue convergence shows as factor-four shrinkage
        for w in records.windows(2) {
            let ratio = w[0].err_lambda_exact.unwrap() / w[1].err_lambda_exact.unwrap();
            assert!((3.5..4.6).contains(&ratio), "ratio {ratio}");
        }
        assert_eq!(records[0].alpha, 0.0);
        assert_eq!(records[0].matvec_total, 0);
        for r in &records[1..] {
            assert!(r.alpha > 0.0);
            assert!(r.matvec_total > 0);
            let theta = r.theta_measured.expect("direct basis present");
            assert!(theta < 0.3, "level {}: measured contraction {theta}", r.level);
        }
    }

    #[test]
    fn study_on_the_variable_coefficient_problem() {
        let h = build_hierarchy(generate_unit_square(4), 3).unwrap();
        let opts = StudyOptions {
            nev: 2,
            ..StudyOptions::default()
        };
        let records =
            convergence_study(&h, &ProblemDefinition::general_ex2(), &opts).unwrap();
        assert_eq!(records.len(), 6);
        for r in &records {
            assert!(r.lambda_dir.is_some());
            assert!(r.err_energy.is_none(), "no analytic energy reference");
            let err = r.err_lambda_exact.expect("Richardson reference present");
            assert!(
                err > 0.0,
                "level {} j {}: extrapolated error {err}",
                r.level,
                r.j
            );
        }
        // per index, eigenvalues decrease with refinement
        for j in 1..=2 {
            let per_level: Vec<f64> = records
                .iter()
                .filter(|r| r.j == j)
                .map(|r| r.lambda_mg)
                .collect();
            for w in per_level.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }
}
