//! The multigrid eigenvalue scheme: a dense solve on the coarsest level
//! followed by one shifted-inverse correction step per refinement level
//! (optionally a few inner repetitions), each costing one V-cycle-
//! preconditioned CG solve.
//!
//! The single-pair driver tracks the lowest eigenvalue; the multi-pair
//! drivers carry the lowest `m` with per-index shifts and restore
//! orthogonality either by Gram-Schmidt or by a Rayleigh-Ritz projection
//! onto the span of the m solutions (the default, since it can rotate
//! within near-degenerate clusters). The per-index solves are independent;
//! they are executed in index order to keep runs bitwise reproducible.

use std::time::Instant;

use crate::assembly::{b_inner, dot, energy_norm, DiscreteForms, ProblemDefinition};
use crate::dense::{spd_condition, sym_generalized_eigen};
use crate::error::{Error, Result};
use crate::linsolve::{cg_solve, shifted_matrix, vcycle_preconditioner, SolveReport};
use crate::mesh::MeshHierarchy;
use crate::sparse::SparseMatrix;

/// Largest free-dof dimension the dense coarse eigensolver accepts by
/// default.
pub const DEFAULT_DENSE_BUDGET: usize = 2000;

/// A shift is attempted only while it stays below this fraction of the
/// current smallest-eigenvalue estimate; anything above cannot give a
/// positive definite system and is halved up front.
const SPD_GUARD: f64 = 0.95;

/// One approximate eigenpair on one hierarchy level.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EigenPair {
    pub lambda: f64,
    /// Coefficients on the free unknowns, normalized to unit energy norm.
    pub coeffs: Vec<f64>,
    /// 1-based hierarchy level the coefficients live on.
    pub level: usize,
}

/// The lowest eigenpairs on one level, ascending by eigenvalue. Sets built
/// by the multi-pair correction steps are a-orthonormal; sets from the
/// coarse eigensolve are additionally b-orthogonal.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EigenSet {
    pub level: usize,
    pub pairs: Vec<EigenPair>,
}

/// How the correction shift is chosen on each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    /// `max{0, (sigma*lambda_k - lambda2_coarse)/(sigma - 1)}`: places the
    /// shift below the target eigenvalue, weighted by the cached second
    /// coarse eigenvalue.
    Paper,
    /// Always 0: plain inverse iteration (the two-grid scheme).
    Zero,
    /// The current Rayleigh quotient. Sits above the fine target eigenvalue,
    /// so the retry policy halves it once before the solve; the classical
    /// cubic rate is not claimed here.
    Rayleigh,
}

impl std::str::FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ShiftMode::Paper),
            "zero" => Ok(ShiftMode::Zero),
            "rayleigh" => Ok(ShiftMode::Rayleigh),
            other => Err(Error::InvalidArgument(format!(
                "unknown shift mode {other:?}; expected paper, zero, or rayleigh"
            ))),
        }
    }
}

impl std::fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftMode::Paper => "paper",
            ShiftMode::Zero => "zero",
            ShiftMode::Rayleigh => "rayleigh",
        })
    }
}

/// Orthogonality restoration used by the multi-pair correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiCorrection {
    /// Project onto the span of the m solutions and solve the small dense
    /// pencil. Handles repeated eigenvalues.
    RayleighRitz,
    /// Sequential Gram-Schmidt in the a-inner product.
    GramSchmidt,
}

/// Shift selection parameters.
#[derive(Debug, Clone)]
pub struct ShiftConfig {
    pub mode: ShiftMode,
    /// Gap weight in the shift formula; must exceed 1.
    pub sigma: f64,
    /// Correction steps per level (prolongation happens only before the
    /// first).
    pub inner_steps: usize,
    /// Halvings of a rejected shift before falling back to zero.
    pub max_shift_retries: u32,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            mode: ShiftMode::Paper,
            sigma: 8.0,
            inner_steps: 1,
            max_shift_retries: 3,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must exceed 1, got {}",
                self.sigma
            )));
        }
        if self.inner_steps < 1 {
            return Err(Error::InvalidArgument(
                "inner_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Linear-solver and budget knobs shared by the drivers.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub coarse_dense_budget: usize,
    pub multi_correction: MultiCorrection,
    /// With timing off, every reported wall time is exactly 0.0, which makes
    /// runs bitwise reproducible.
    pub timing: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            cg_tol: 1e-10,
            cg_max_iter: 20_000,
            coarse_dense_budget: DEFAULT_DENSE_BUDGET,
            multi_correction: MultiCorrection::RayleighRitz,
            timing: true,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cg tolerance must lie in (0, 1), got {}",
                self.cg_tol
            )));
        }
        Ok(())
    }
}

/// Diagnostic record of one correction step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelTrace {
    /// 1-based level the step targets.
    pub level: usize,
    /// 1-based eigenvalue index within the tracked set.
    pub j: usize,
    /// 1-based inner-iteration number on this level.
    pub inner_step: usize,
    pub alpha_requested: f64,
    /// Shift actually used after the retry policy.
    pub alpha: f64,
    pub shift_retries: u32,
    /// Predicted contraction `|lambda - alpha| / (gap partner - alpha)`,
    /// when a partner estimate is available and exceeds the shift.
    pub theta_estimate: Option<f64>,
    pub lambda_after: f64,
    /// `|A u - lambda M u|_2` of the accepted vector.
    pub eigen_residual: f64,
    pub solve: SolveReport,
    /// Operator applications across all retry attempts of this step.
    pub matvec_total: usize,
    pub wall_seconds: f64,
}

/// Assembled forms on every level of a hierarchy plus the prolongations,
/// computed once and shared by drivers, studies, and references.
#[derive(Debug)]
pub struct FormsHierarchy {
    /// Ordered coarse to fine.
    pub levels: Vec<DiscreteForms>,
    /// prolongations[k] maps free-dof vectors of level k to level k+1.
    pub prolongations: Vec<SparseMatrix>,
}

impl FormsHierarchy {
    pub fn assemble(hierarchy: &MeshHierarchy, problem: &ProblemDefinition) -> Result<Self> {
        let levels = hierarchy
            .levels
            .iter()
            .map(|m| crate::assembly::assemble(m, problem))
            .collect::<Result<Vec<_>>>()?;
        Ok(FormsHierarchy {
            levels,
            prolongations: hierarchy.prolongations.clone(),
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &DiscreteForms {
        self.levels.last().expect("hierarchy has at least one level")
    }
}

/// `(v' A v) / (v' M v)`.
pub fn rayleigh_quotient(forms: &DiscreteForms, v: &[f64]) -> Result<f64> {
    if v.len() != forms.ndof() {
        return Err(Error::DimensionMismatch {
            expected: forms.ndof(),
            got: v.len(),
        });
    }
    let num = dot(v, &forms.stiffness.mul_vec(v));
    let den = dot(v, &forms.mass.mul_vec(v));
    if den <= 0.0 {
        return Err(Error::InvalidArgument(
            "Rayleigh quotient of a numerically zero vector".into(),
        ));
    }
    Ok(num / den)
}

/// The `count` smallest eigenpairs of the assembled pencil by a dense
/// factorization, a-normalized, ascending, b-orthogonal.
pub fn coarse_eigensolve(forms: &DiscreteForms, count: usize) -> Result<EigenSet> {
    coarse_eigensolve_with_budget(forms, count, DEFAULT_DENSE_BUDGET)
}

pub fn coarse_eigensolve_with_budget(
    forms: &DiscreteForms,
    count: usize,
    dense_budget: usize,
) -> Result<EigenSet> {
    let n = forms.ndof();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "requested {count} eigenpairs from a {n}-dimensional problem"
        )));
    }
    if n > dense_budget {
        return Err(Error::DenseBudget {
            what: "coarse eigensolve".into(),
            dim: n,
            budget: dense_budget,
        });
    }
    let (values, vectors) = sym_generalized_eigen(
        &forms.stiffness.to_dense(),
        &forms.mass.to_dense(),
    )?;
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let mut coeffs: Vec<f64> = vectors.column(k).iter().copied().collect();
        let nrm = energy_norm(forms, &coeffs)?;
        if nrm <= 0.0 {
            return Err(Error::Factorization("zero-norm eigenvector column"));
        }
        for c in &mut coeffs {
            *c /= nrm;
        }
        pairs.push(EigenPair {
            lambda: values[k],
            coeffs,
            level: forms.level,
        });
    }
    Ok(EigenSet {
        level: forms.level,
        pairs,
    })
}

/// Correction shift for the next level given the current eigenvalue estimate
/// and the cached second-smallest coarse eigenvalue.
pub fn shift_select(lambda_k: f64, lambda2_coarse: f64, cfg: &ShiftConfig) -> f64 {
    debug_assert!(cfg.sigma > 1.0);
    match cfg.mode {
        ShiftMode::Paper => {
            ((cfg.sigma * lambda_k - lambda2_coarse) / (cfg.sigma - 1.0)).max(0.0)
        }
        ShiftMode::Zero => 0.0,
        ShiftMode::Rayleigh => lambda_k,
    }
}

/// Contraction factor `|lambda1 - alpha| / (lambda2 - alpha)` of one shifted
/// correction step; requires the shift below the second eigenvalue.
pub fn theta_factor(lambda1_fine: f64, lambda2_fine: f64, alpha: f64) -> Result<f64> {
    if alpha >= lambda2_fine {
        return Err(Error::InvalidArgument(format!(
            "shift {alpha} is not below the second eigenvalue {lambda2_fine}"
        )));
    }
    Ok((lambda1_fine - alpha).abs() / (lambda2_fine - alpha))
}

fn theta_hint(lambda_after: f64, alpha: f64, partner: Option<f64>) -> Option<f64> {
    match partner {
        Some(l2) if l2.is_finite() && alpha < l2 => {
            Some((lambda_after - alpha).abs() / (l2 - alpha))
        }
        _ => None,
    }
}

/// `|A v - lambda M v|_2`.
fn eigen_residual_norm(forms: &DiscreteForms, lambda: f64, v: &[f64]) -> f64 {
    let av = forms.stiffness.mul_vec(v);
    let mv = forms.mass.mul_vec(v);
    av.iter()
        .zip(&mv)
        .map(|(a, m)| (a - lambda * m).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Maps `coeffs` to level `fine_idx`: pass-through when already there,
/// prolongation when one level coarser.
fn lift_to_level(fh: &FormsHierarchy, fine_idx: usize, coeffs: &[f64]) -> Result<Vec<f64>> {
    let fine_n = fh.levels[fine_idx].ndof();
    if coeffs.len() == fine_n {
        return Ok(coeffs.to_vec());
    }
    if fine_idx > 0 && coeffs.len() == fh.levels[fine_idx - 1].ndof() {
        return Ok(fh.prolongations[fine_idx - 1].mul_vec(coeffs));
    }
    Err(Error::DimensionMismatch {
        expected: fine_n,
        got: coeffs.len(),
    })
}

struct GuardedSolve {
    x: Vec<f64>,
    report: SolveReport,
    alpha_used: f64,
    retries: u32,
    matvec_total: usize,
}

/// Solves `(A - alpha M) x = rhs` on level `fine_idx` with V-cycle PCG.
/// A shift that is rejected (preemptively by the positivity guard against
/// `lambda1_est`, by a failed coarse factorization, or by CG curvature) is
/// halved up to `max_retries` times and then replaced by zero, which always
/// yields a positive definite system for this problem class.
fn solve_shifted_guarded(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alpha_requested: f64,
    lambda1_est: f64,
    max_retries: u32,
    solver: &SolverOptions,
    rhs: &[f64],
) -> Result<GuardedSolve> {
    let level = fh.levels[fine_idx].level;
    let mut alpha = alpha_requested;
    let mut retries = 0u32;
    let mut matvec_total = 0usize;

    let advance = |alpha: &mut f64, retries: &mut u32| {
        *retries += 1;
        if *retries > max_retries {
            *alpha = 0.0;
        } else {
            *alpha *= 0.5;
        }
    };

    loop {
        if alpha > 0.0 && alpha >= SPD_GUARD * lambda1_est {
            // cannot be SPD at or above the target eigenvalue; skip the solve
            advance(&mut alpha, &mut retries);
            continue;
        }
        let matrices: Vec<SparseMatrix> = fh.levels[..=fine_idx]
            .iter()
            .map(|f| shifted_matrix(&f.stiffness, &f.mass, alpha))
            .collect();
        let vc = match vcycle_preconditioner(matrices, &fh.prolongations[..fine_idx]) {
            Ok(vc) => vc,
            Err(_) if alpha > 0.0 => {
                // a coarser level is indefinite for this shift
                advance(&mut alpha, &mut retries);
                continue;
            }
            Err(e) => return Err(e),
        };
        let (x, report) = cg_solve(
            vc.finest_matrix(),
            rhs,
            solver.cg_tol,
            solver.cg_max_iter,
            Some(&vc),
        );
        matvec_total += report.matvec_count;
        if report.indefinite_detected {
            if alpha == 0.0 {
                return Err(Error::ShiftedSolveFailed { level, retries });
            }
            advance(&mut alpha, &mut retries);
            continue;
        }
        if !report.converged {
            log::warn!(
                "level {level}: CG stopped at relative residual {:.3e} after {} iterations",
                report.relative_residual,
                report.iterations
            );
        }
        return Ok(GuardedSolve {
            x,
            report,
            alpha_used: alpha,
            retries,
            matvec_total,
        });
    }
}

fn align_sign(forms: &DiscreteForms, v: &mut [f64], reference: &[f64]) {
    let s = b_inner(forms, v, reference).unwrap_or(0.0);
    if s < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    } else if s == 0.0 {
        // no overlap to align against; make the largest entry positive
        let mut amax = 0.0;
        let mut neg = false;
        for &x in v.iter() {
            if x.abs() > amax {
                amax = x.abs();
                neg = x < 0.0;
            }
        }
        if neg {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn correction_step_impl(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alpha: f64,
    lambda1_est: f64,
    lambda_gap_hint: Option<f64>,
    u_prev: &EigenPair,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenPair, LevelTrace)> {
    let start = Instant::now();
    let forms = &fh.levels[fine_idx];
    let u_on_fine = lift_to_level(fh, fine_idx, &u_prev.coeffs)?;
    let rhs = forms.mass.mul_vec(&u_on_fine);

    let sol = solve_shifted_guarded(
        fh,
        fine_idx,
        alpha,
        lambda1_est,
        shift.max_shift_retries,
        solver,
        &rhs,
    )?;

    let mut x = sol.x;
    align_sign(forms, &mut x, &u_on_fine);
    let nrm = energy_norm(forms, &x)?;
    if !nrm.is_finite() || nrm < 1e-300 {
        return Err(Error::NonConvergence(format!(
            "correction on level {} produced a numerically zero direction",
            forms.level
        )));
    }
    for xi in &mut x {
        *xi /= nrm;
    }
    let lambda = rayleigh_quotient(forms, &x)?;
    let eigen_residual = eigen_residual_norm(forms, lambda, &x);
    log::debug!(
        "level {}: alpha {:.6} (requested {:.6}, retries {}), lambda {:.12}, |lambda - alpha| {:.3e}",
        forms.level,
        sol.alpha_used,
        alpha,
        sol.retries,
        lambda,
        (lambda - sol.alpha_used).abs()
    );

    let trace = LevelTrace {
        level: forms.level,
        j: 1,
        inner_step: 1,
        alpha_requested: alpha,
        alpha: sol.alpha_used,
        shift_retries: sol.retries,
        theta_estimate: theta_hint(lambda, sol.alpha_used, lambda_gap_hint),
        lambda_after: lambda,
        eigen_residual,
        solve: sol.report,
        matvec_total: sol.matvec_total,
        wall_seconds: if solver.timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok((
        EigenPair {
            lambda,
            coeffs: x,
            level: forms.level,
        },
        trace,
    ))
}

/// One shifted-inverse correction step: solve `(A - alpha M) x = M u`,
/// where `u` is `u_prev` carried to level `fine_idx` (prolongated when it
/// lives one level coarser), then energy-normalize and take the Rayleigh
/// quotient. The sign satisfies `b_inner(new, carried previous) >= 0`.
pub fn correction_step(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alpha: f64,
    lambda_gap_hint: Option<f64>,
    u_prev: &EigenPair,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenPair, LevelTrace)> {
    correction_step_impl(
        fh,
        fine_idx,
        alpha,
        u_prev.lambda,
        lambda_gap_hint,
        u_prev,
        shift,
        solver,
    )
}

/// Up to `shift.inner_steps` correction steps on one level. The first step
/// carries `u_prev` up; later steps stay on the level, reusing the same
/// shift (modes `paper`/`zero`) or the fresh Rayleigh quotient (`rayleigh`).
/// Inner iteration stops early once the eigenvalue residual drops below
/// 0.1 times `prev_level_residual`.
#[allow(clippy::too_many_arguments)]
pub fn multi_correction_step(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alpha0: f64,
    lambda_gap_hint: Option<f64>,
    u_prev: &EigenPair,
    shift: &ShiftConfig,
    solver: &SolverOptions,
    prev_level_residual: Option<f64>,
) -> Result<(EigenPair, Vec<LevelTrace>)> {
    let mut traces = Vec::with_capacity(shift.inner_steps);
    let mut current = u_prev.clone();
    for step in 1..=shift.inner_steps {
        let alpha = if step == 1 {
            alpha0
        } else if shift.mode == ShiftMode::Rayleigh {
            current.lambda
        } else {
            alpha0
        };
        let (next, mut trace) =
            correction_step(fh, fine_idx, alpha, lambda_gap_hint, &current, shift, solver)?;
        trace.inner_step = step;
        let residual = trace.eigen_residual;
        traces.push(trace);
        current = next;
        if let Some(prev) = prev_level_residual {
            if residual <= 0.1 * prev {
                break;
            }
        }
    }
    Ok((current, traces))
}

/// Runs the single-pair scheme and returns the per-level eigenpairs (one
/// per hierarchy level, starting with the coarse solve) plus all traces.
pub fn eigen_multigrid_track(
    fh: &FormsHierarchy,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(Vec<EigenPair>, Vec<LevelTrace>)> {
    shift.validate()?;
    solver.validate()?;
    let coarse_forms = &fh.levels[0];
    let count = 2.min(coarse_forms.ndof());
    let coarse = coarse_eigensolve_with_budget(coarse_forms, count, solver.coarse_dense_budget)?;
    // the shift formula wants the second eigenvalue of the coarsest level,
    // fixed once; a one-dimensional coarse space degrades the mode to zero
    let lambda2_h1 = coarse
        .pairs
        .get(1)
        .map(|p| p.lambda)
        .unwrap_or(f64::INFINITY);

    let mut u = coarse.pairs[0].clone();
    let mut per_level = vec![u.clone()];
    let mut traces = Vec::new();
    let mut prev_residual: Option<f64> = None;
    for k in 1..fh.n_levels() {
        let alpha0 = shift_select(u.lambda, lambda2_h1, shift);
        let (next, mut step_traces) = multi_correction_step(
            fh,
            k,
            alpha0,
            Some(lambda2_h1),
            &u,
            shift,
            solver,
            prev_residual,
        )?;
        prev_residual = step_traces.last().map(|t| t.eigen_residual);
        traces.append(&mut step_traces);
        u = next;
        per_level.push(u.clone());
    }
    Ok((per_level, traces))
}

/// Single lowest eigenpair on the finest level of a pre-assembled hierarchy.
pub fn eigen_multigrid_on(
    fh: &FormsHierarchy,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenPair, Vec<LevelTrace>)> {
    let (mut per_level, traces) = eigen_multigrid_track(fh, shift, solver)?;
    Ok((per_level.pop().expect("at least the coarse level"), traces))
}

/// Single lowest eigenpair of `problem` on the finest level of `hierarchy`.
pub fn eigen_multigrid(
    hierarchy: &MeshHierarchy,
    problem: &ProblemDefinition,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenPair, Vec<LevelTrace>)> {
    let fh = FormsHierarchy::assemble(hierarchy, problem)?;
    eigen_multigrid_on(&fh, shift, solver)
}

/// Shared first phase of the multi-pair corrections: the m guarded solves.
/// Returns raw directions plus per-index traces (lambda and residual filled
/// in by the caller once vectors are final).
fn solve_directions(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alphas: &[f64],
    prev: &EigenSet,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<LevelTrace>)> {
    let forms = &fh.levels[fine_idx];
    assert_eq!(alphas.len(), prev.pairs.len(), "one shift per tracked pair");
    let lambda1_est = prev.pairs[0].lambda;

    let mut raw = Vec::with_capacity(prev.pairs.len());
    let mut carried = Vec::with_capacity(prev.pairs.len());
    let mut traces = Vec::with_capacity(prev.pairs.len());
    for (j, (pair, &alpha)) in prev.pairs.iter().zip(alphas).enumerate() {
        let start = Instant::now();
        let u_on_fine = lift_to_level(fh, fine_idx, &pair.coeffs)?;
        let rhs = forms.mass.mul_vec(&u_on_fine);
        let sol = solve_shifted_guarded(
            fh,
            fine_idx,
            alpha,
            lambda1_est,
            shift.max_shift_retries,
            solver,
            &rhs,
        )?;
        traces.push(LevelTrace {
            level: forms.level,
            j: j + 1,
            inner_step: 1,
            alpha_requested: alpha,
            alpha: sol.alpha_used,
            shift_retries: sol.retries,
            theta_estimate: None,
            lambda_after: f64::NAN,
            eigen_residual: f64::NAN,
            solve: sol.report,
            matvec_total: sol.matvec_total,
            wall_seconds: if solver.timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        raw.push(sol.x);
        carried.push(u_on_fine);
    }
    Ok((raw, carried, traces))
}

/// Multi-pair correction by sequential Gram-Schmidt: solve the m shifted
/// systems, orthogonalize each solution in the a-inner product against the
/// already-accepted vectors, normalize, and sort ascending by Rayleigh
/// quotient. The output set is a-orthonormal.
pub fn correction_step_multi_gs(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alphas: &[f64],
    prev: &EigenSet,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenSet, Vec<LevelTrace>)> {
    let forms = &fh.levels[fine_idx];
    let (raw, carried, mut traces) = solve_directions(fh, fine_idx, alphas, prev, shift, solver)?;

    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
    let mut stiff_applied: Vec<Vec<f64>> = Vec::with_capacity(raw.len());
    let mut lambdas = Vec::with_capacity(raw.len());
    for (j, mut x) in raw.into_iter().enumerate() {
        let before = energy_norm(forms, &x)?;
        // two passes keep the set orthogonal to working precision
        for _ in 0..2 {
            for (u, au) in accepted.iter().zip(&stiff_applied) {
                let c = dot(&x, au);
                for (xi, ui) in x.iter_mut().zip(u) {
                    *xi -= c * ui;
                }
            }
        }
        let after = energy_norm(forms, &x)?;
        if before <= 0.0 || after <= 1e-12 * before {
            return Err(Error::DegenerateSubspace {
                index: j + 1,
                norm: if before > 0.0 { after / before } else { 0.0 },
            });
        }
        for xi in &mut x {
            *xi /= after;
        }
        align_sign(forms, &mut x, &carried[j]);
        let lambda = rayleigh_quotient(forms, &x)?;
        lambdas.push(lambda);
        stiff_applied.push(forms.stiffness.mul_vec(&x));
        accepted.push(x);
    }

    finalize_set(forms, accepted, lambdas, &mut traces)
}

/// Multi-pair correction by Rayleigh-Ritz: solve the m shifted systems,
/// project the pencil onto their span, solve the small dense eigenproblem,
/// and lift. Ritz pairs come out a-orthonormal, b-orthogonal, ascending.
pub fn correction_step_multi_rr(
    fh: &FormsHierarchy,
    fine_idx: usize,
    alphas: &[f64],
    prev: &EigenSet,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenSet, Vec<LevelTrace>)> {
    let forms = &fh.levels[fine_idx];
    let (mut raw, carried, mut traces) =
        solve_directions(fh, fine_idx, alphas, prev, shift, solver)?;
    let m = raw.len();

    // per-column energy normalization: spans are scale-free, and it makes
    // the Gram condition measure angles rather than shift amplification
    for (j, x) in raw.iter_mut().enumerate() {
        let nrm = energy_norm(forms, x)?;
        if nrm <= 0.0 {
            return Err(Error::DegenerateSubspace {
                index: j + 1,
                norm: nrm,
            });
        }
        for xi in x.iter_mut() {
            *xi /= nrm;
        }
    }

    let a_applied: Vec<Vec<f64>> = raw.iter().map(|x| forms.stiffness.mul_vec(x)).collect();
    let m_applied: Vec<Vec<f64>> = raw.iter().map(|x| forms.mass.mul_vec(x)).collect();
    let mut ga = nalgebra::DMatrix::zeros(m, m);
    let mut gm = nalgebra::DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let a = dot(&raw[i], &a_applied[j]);
            let b = dot(&raw[i], &m_applied[j]);
            ga[(i, j)] = a;
            ga[(j, i)] = a;
            gm[(i, j)] = b;
            gm[(j, i)] = b;
        }
    }

    const COND_LIMIT: f64 = 1e12;
    let cond = spd_condition(&gm);
    if !(cond < COND_LIMIT) {
        return Err(Error::RankDeficient {
            cond,
            limit: COND_LIMIT,
        });
    }

    let (ritz_values, y) = sym_generalized_eigen(&ga, &gm)?;
    let n = forms.ndof();
    let mut accepted = Vec::with_capacity(m);
    let mut lambdas = Vec::with_capacity(m);
    for k in 0..m {
        let mut u = vec![0.0; n];
        for (i, x) in raw.iter().enumerate() {
            let c = y[(i, k)];
            for (ui, xi) in u.iter_mut().zip(x) {
                *ui += c * xi;
            }
        }
        let nrm = energy_norm(forms, &u)?;
        if nrm <= 0.0 {
            return Err(Error::DegenerateSubspace {
                index: k + 1,
                norm: nrm,
            });
        }
        for ui in &mut u {
            *ui /= nrm;
        }
        align_sign(forms, &mut u, &carried[k]);
        lambdas.push(ritz_values[k]);
        accepted.push(u);
    }

    finalize_set(forms, accepted, lambdas, &mut traces)
}

/// Sorts pairs ascending, fills the per-index trace diagnostics, and wraps
/// the result. Traces follow the sort so trace j describes output pair j.
fn finalize_set(
    forms: &DiscreteForms,
    vectors: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    traces: &mut [LevelTrace],
) -> Result<(EigenSet, Vec<LevelTrace>)> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| {
        lambdas[a]
            .partial_cmp(&lambdas[b])
            .expect("eigenvalue estimates are finite")
    });

    let mut pairs = Vec::with_capacity(lambdas.len());
    let mut sorted_traces = Vec::with_capacity(lambdas.len());
    let mut vectors: Vec<Option<Vec<f64>>> = vectors.into_iter().map(Some).collect();
    for (rank, &src) in order.iter().enumerate() {
        let coeffs = vectors[src].take().expect("each source used once");
        let lambda = lambdas[src];
        let mut trace = traces[src].clone();
        trace.j = rank + 1;
        trace.lambda_after = lambda;
        trace.eigen_residual = eigen_residual_norm(forms, lambda, &coeffs);
        sorted_traces.push(trace);
        pairs.push(EigenPair {
            lambda,
            coeffs,
            level: forms.level,
        });
    }
    Ok((
        EigenSet {
            level: forms.level,
            pairs,
        },
        sorted_traces,
    ))
}

/// Runs the multi-pair scheme for the lowest `m` eigenpairs and returns the
/// per-level sets plus all traces. The coarse solve computes `m + 1` pairs;
/// the extra eigenvalue is cached for the last tracked index's shift.
pub fn eigen_multigrid_multi_track(
    fh: &FormsHierarchy,
    m: usize,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(Vec<EigenSet>, Vec<LevelTrace>)> {
    shift.validate()?;
    solver.validate()?;
    if m < 1 {
        return Err(Error::InvalidArgument(
            "at least one eigenpair must be requested".into(),
        ));
    }
    let coarse_forms = &fh.levels[0];
    if coarse_forms.ndof() < m + 1 {
        return Err(Error::InvalidArgument(format!(
            "coarse level with {} unknowns cannot resolve {} eigenvalues (need m + 1)",
            coarse_forms.ndof(),
            m + 1
        )));
    }
    let coarse =
        coarse_eigensolve_with_budget(coarse_forms, m + 1, solver.coarse_dense_budget)?;
    let lambda_next_h1 = coarse.pairs[m].lambda;
    let mut set = EigenSet {
        level: coarse.level,
        pairs: coarse.pairs[..m].to_vec(),
    };

    let mut per_level = vec![set.clone()];
    let mut traces = Vec::new();
    let mut prev_residual: Option<f64> = None;
    for k in 1..fh.n_levels() {
        let mut level_residual = f64::NAN;
        for step in 1..=shift.inner_steps {
            // partner of index j is the next tracked eigenvalue estimate;
            // the last index uses the cached coarse value
            let alphas: Vec<f64> = (0..m)
                .map(|j| {
                    let partner = if j + 1 < m {
                        set.pairs[j + 1].lambda
                    } else {
                        lambda_next_h1
                    };
                    shift_select(set.pairs[j].lambda, partner, shift)
                })
                .collect();
            let (next, mut step_traces) = match solver.multi_correction {
                MultiCorrection::RayleighRitz => {
                    correction_step_multi_rr(fh, k, &alphas, &set, shift, solver)?
                }
                MultiCorrection::GramSchmidt => {
                    correction_step_multi_gs(fh, k, &alphas, &set, shift, solver)?
                }
            };
            set = next;
            level_residual = step_traces
                .iter()
                .map(|t| t.eigen_residual)
                .fold(0.0, f64::max);
            for t in &mut step_traces {
                t.inner_step = step;
                let partner = if t.j < m {
                    Some(set.pairs[t.j].lambda)
                } else {
                    Some(lambda_next_h1)
                };
                t.theta_estimate = theta_hint(t.lambda_after, t.alpha, partner);
            }
            traces.append(&mut step_traces);
            if let Some(prev) = prev_residual {
                if level_residual <= 0.1 * prev {
                    break;
                }
            }
        }
        prev_residual = Some(level_residual);
        per_level.push(set.clone());
    }
    Ok((per_level, traces))
}

/// Lowest `m` eigenpairs on the finest level of a pre-assembled hierarchy.
pub fn eigen_multigrid_multi_on(
    fh: &FormsHierarchy,
    m: usize,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenSet, Vec<LevelTrace>)> {
    let (mut per_level, traces) = eigen_multigrid_multi_track(fh, m, shift, solver)?;
    Ok((per_level.pop().expect("at least the coarse level"), traces))
}

/// Lowest `m` eigenpairs of `problem` on the finest level of `hierarchy`.
pub fn eigen_multigrid_multi(
    hierarchy: &MeshHierarchy,
    problem: &ProblemDefinition,
    m: usize,
    shift: &ShiftConfig,
    solver: &SolverOptions,
) -> Result<(EigenSet, Vec<LevelTrace>)> {
    let fh = FormsHierarchy::assemble(hierarchy, problem)?;
    eigen_multigrid_multi_on(&fh, m, shift, solver)
}
