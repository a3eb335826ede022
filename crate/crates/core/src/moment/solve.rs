//! Solving a [`MomentProblem`] with the interior-point LMI solver.
//!
//! The complex moment matrix is replaced by its real embedding
//! `[[Re Γ, −Im Γ], [Im Γ, Re Γ]]`; each free real or imaginary part of a
//! class becomes one scalar variable.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::min_hermitian_eigenvalue;
use crate::protocol::clamp_guess;
use crate::sdp::{solve_lmi, IpmStatus, LmiProblem, LpRow, SolverOptions, SymSparse};

use super::problem::{MomentProblem, Part};
use super::reduce::{part_index, reduce, Infeasible, Reduced};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveTolerances {
    /// Duality gap, in units of the (scaled) objective.
    pub gap: f64,
    /// Most negative eigenvalue tolerated in the returned moment matrix.
    pub psd: f64,
    /// Relaxes the cone constraint to `Γ ⪰ −relax·I` (still a valid bound).
    pub relax: f64,
    /// Remove forced kernel directions before solving.
    pub facial_reduction: bool,
    pub max_iter: usize,
}

impl Default for SolveTolerances {
    fn default() -> Self {
        Self {
            gap: 1e-7,
            psd: 1e-8,
            relax: 0.0,
            facial_reduction: true,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    /// Gap and positivity certificates both met.
    Optimal,
    /// A bound was produced but a certificate missed its tolerance.
    Inaccurate,
    /// No moment matrix satisfies the constraints.
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Inaccurate => "inaccurate",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Upper bound on the optimum: the larger of the two objectives.
    pub value: f64,
    /// Objective of the dual certificate (an upper bound when feasible).
    pub primal: f64,
    /// Objective of the returned moment matrix (a lower bound when feasible).
    pub dual: f64,
    pub gap: f64,
    pub min_eigenvalue: f64,
    /// Relative equality residuals reported by the interior-point solver.
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub iterations: usize,
    /// Side of the cone constraint after facial reduction, and the number
    /// of free scalar variables.
    pub reduced_dim: usize,
    pub variables: usize,
    pub moment_matrix: DMatrix<Complex64>,
}

struct Lowered {
    lmi: LmiProblem,
    reduced: Reduced,
    constant: f64,
}

fn lower(problem: &MomentProblem, scale: f64, tol: &SolveTolerances) -> Result<Lowered, Infeasible> {
    let reduced = reduce(problem, tol.facial_reduction)?;
    let kept = &reduced.kept;
    let mut local = vec![usize::MAX; problem.dim()];
    for (i, &p) in kept.iter().enumerate() {
        local[p] = i;
    }

    // Γ = F0 + Σ tᵢ Fᵢ on the kept indices; the solver wants C = F0 and
    // Aᵢ = −Fᵢ.
    let n = kept.len();
    let mut c = SymSparse::default();
    let mut a = vec![SymSparse::default(); reduced.nvars];
    for (id, cl) in problem.classes().iter().enumerate() {
        let re = &reduced.parts[part_index(id, Part::Re)];
        let im = &reduced.parts[part_index(id, Part::Im)];
        for e in &cl.entries {
            let (p, q) = (local[e.p], local[e.q]);
            if p == usize::MAX || q == usize::MAX {
                continue;
            }
            c.push(p, q, re.c);
            c.push(n + p, n + q, re.c);
            for &(v, x) in &re.terms {
                a[v].push(p, q, -x);
                a[v].push(n + p, n + q, -x);
            }
            if p == q {
                continue;
            }
            let s = if e.conj { -1.0 } else { 1.0 };
            if im.c != 0.0 {
                c.push(q, n + p, s * im.c);
                c.push(p, n + q, -s * im.c);
            }
            for &(v, x) in &im.terms {
                a[v].push(q, n + p, -s * x);
                a[v].push(p, n + q, s * x);
            }
        }
    }
    for p in 0..2 * n {
        c.push(p, p, tol.relax);
    }
    c.compress();
    for ai in &mut a {
        ai.compress();
    }

    let mut b = vec![0.0; reduced.nvars];
    let mut constant = 0.0;
    for &(class, w) in problem.objective() {
        let e = &reduced.parts[part_index(class, Part::Re)];
        constant += scale * w * e.c;
        for &(v, x) in &e.terms {
            b[v] += scale * w * x;
        }
    }

    // lo ≤ e ≤ hi as rows of `constant − Σ coeff·t ≥ 0`.
    let mut lp = Vec::new();
    for (&k, &(lo, hi)) in &reduced.bounds {
        let e = &reduced.parts[k];
        if e.is_constant() {
            continue;
        }
        if lo.is_finite() {
            lp.push(LpRow {
                constant: e.c - lo,
                terms: e.terms.iter().map(|&(v, x)| (v, -x)).collect(),
            });
        }
        if hi.is_finite() {
            lp.push(LpRow {
                constant: hi - e.c,
                terms: e.terms.clone(),
            });
        }
    }

    Ok(Lowered {
        lmi: LmiProblem {
            dim: 2 * n,
            c,
            a,
            b,
            lp,
        },
        reduced,
        constant,
    })
}

/// Maximizes the objective of `problem`, handing the interior-point method
/// the objective multiplied by `scale >= 1`. Values in the returned solution
/// are in unscaled units; the method stops at a scaled gap of `tol.gap`, so
/// the reported gap is at most `tol.gap / scale`. Scaling by `1/p(succ)`
/// makes the tolerance apply to the guessing probability.
///
/// Contradictory constraints are reported as an `Infeasible` solution, not
/// an error, so callers can treat every outcome uniformly.
pub fn solve_scaled(problem: &MomentProblem, scale: f64, tol: &SolveTolerances) -> Result<SdpSolution> {
    if !(scale.is_finite() && scale >= 1.0) {
        return Err(Error::InvalidParameter(format!("objective scale must be finite and >= 1, got {scale}")));
    }
    let lowered = match lower(problem, scale, tol) {
        Ok(l) => l,
        Err(Infeasible(_)) => {
            let d = problem.dim();
            return Ok(SdpSolution {
                status: SolveStatus::Infeasible,
                value: f64::NAN,
                primal: f64::NAN,
                dual: f64::NAN,
                gap: f64::INFINITY,
                min_eigenvalue: f64::NAN,
                primal_infeasibility: f64::NAN,
                dual_infeasibility: f64::NAN,
                iterations: 0,
                reduced_dim: 0,
                variables: 0,
                moment_matrix: DMatrix::zeros(d, d),
            });
        }
    };
    let opts = SolverOptions {
        gap_tol: tol.gap,
        feas_tol: 1e-8,
        max_iter: tol.max_iter,
    };
    let res = solve_lmi(&lowered.lmi, &opts);
    let t = res.y.as_slice();
    let parts = &lowered.reduced.parts;
    let values: Vec<Complex64> = (0..problem.classes().len())
        .map(|c| {
            Complex64::new(
                parts[part_index(c, Part::Re)].eval(t),
                parts[part_index(c, Part::Im)].eval(t),
            )
        })
        .collect();
    let gamma = problem.assemble(&values);
    let min_eig = min_hermitian_eigenvalue(&gamma);
    let primal = (res.primal_objective + lowered.constant) / scale;
    let dual = (res.dual_objective + lowered.constant) / scale;
    let gap = (primal - dual).abs();
    let status = match res.status {
        IpmStatus::Infeasible => SolveStatus::Infeasible,
        IpmStatus::Converged if gap <= tol.gap && min_eig >= -tol.psd => SolveStatus::Optimal,
        _ => SolveStatus::Inaccurate,
    };
    Ok(SdpSolution {
        status,
        value: primal.max(dual),
        primal,
        dual,
        gap,
        min_eigenvalue: min_eig,
        primal_infeasibility: res.primal_infeasibility,
        dual_infeasibility: res.dual_infeasibility,
        iterations: res.iterations,
        reduced_dim: lowered.reduced.kept.len(),
        variables: lowered.reduced.nvars,
        moment_matrix: gamma,
    })
}

pub fn solve(problem: &MomentProblem, tol: &SolveTolerances) -> Result<SdpSolution> {
    solve_scaled(problem, 1.0, tol)
}

/// `pg = clamp(value / p(succ), 1/2, 1)`.
pub fn guessing_bound(sol: &SdpSolution, p_succ: f64) -> Result<f64> {
    if p_succ <= 0.0 {
        return Err(Error::NoRawKey);
    }
    if sol.status == SolveStatus::Infeasible || sol.value.is_nan() {
        return Err(Error::Solver {
            status: sol.status.as_str().into(),
            detail: "no bound available".into(),
        });
    }
    Ok(clamp_guess(sol.value / p_succ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::monomial::generate_monomials;
    use crate::moment::problem::{build_problem, GramSpec};
    use crate::protocol::{gram_of_family, loss_only_stats, qubit_states, sifting_stats, GramMatrix, StatTable};
    use std::f64::consts::PI;

    #[test]
    fn orthogonal_states_are_insecure() {
        // Orthogonal states can be read out without disturbance.
        let g = GramMatrix::identity(2).unwrap();
        let stats = loss_only_stats(&g, 1.0).unwrap();
        let mono = generate_monomials(2, 1, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let ps = sifting_stats(&stats);
        let sol = solve_scaled(&p, 1.0 / ps.p_succ, &SolveTolerances::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{sol:?}");
        assert!((sol.value - ps.p_succ).abs() < 1e-7, "{}", sol.value);
        assert_eq!(guessing_bound(&sol, ps.p_succ).unwrap(), 1.0);
        assert!(p.max_violation(&sol.moment_matrix) < 1e-7);
    }

    #[test]
    fn conflicting_statistics_are_infeasible() {
        // Identical states cannot produce different click rates.
        let g = GramMatrix::constant_overlap(2, 1.0).unwrap();
        let stats = StatTable::new(DMatrix::from_row_slice(2, 2, &[0.1, 0.5, 0.5, 0.1])).unwrap();
        let mono = generate_monomials(2, 1, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let sol = solve(&p, &SolveTolerances::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible, "{sol:?}");
    }

    #[test]
    fn lossless_b92_is_secure() {
        let g = gram_of_family(&qubit_states(2, PI / 4.0).unwrap());
        let stats = loss_only_stats(&g, 1.0).unwrap();
        let mono = generate_monomials(2, 2, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let ps = sifting_stats(&stats);
        let sol = solve_scaled(&p, 1.0 / ps.p_succ, &SolveTolerances::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{sol:?}");
        let pg = guessing_bound(&sol, ps.p_succ).unwrap();
        assert!(sol.value < ps.p_succ - 1e-3 && pg >= 0.5, "{pg}");
    }

    #[test]
    fn no_clicks_give_zero() {
        let g = gram_of_family(&qubit_states(3, 1.0).unwrap());
        let stats = loss_only_stats(&g, 0.0).unwrap();
        let mono = generate_monomials(3, 1, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let sol = solve(&p, &SolveTolerances::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "{sol:?}");
        assert!(sol.value.abs() < 1e-7, "{}", sol.value);
        assert_eq!(guessing_bound(&sol, 0.0), Err(Error::NoRawKey));
    }

    #[test]
    fn guessing_ratio_is_clamped() {
        let mut sol = SdpSolution {
            status: SolveStatus::Optimal,
            value: 0.1,
            primal: 0.1,
            dual: 0.1,
            gap: 0.0,
            min_eigenvalue: 0.0,
            primal_infeasibility: 0.0,
            dual_infeasibility: 0.0,
            iterations: 0,
            reduced_dim: 0,
            variables: 0,
            moment_matrix: DMatrix::zeros(1, 1),
        };
        assert_eq!(guessing_bound(&sol, 0.2).unwrap(), 0.5);
        assert_eq!(guessing_bound(&sol, 0.1).unwrap(), 1.0);
        sol.value = 0.375;
        assert_eq!(guessing_bound(&sol, 0.5).unwrap(), 0.75);
        sol.value = 0.45;
        assert_eq!(guessing_bound(&sol, 0.4).unwrap(), 1.0);
    }
}
