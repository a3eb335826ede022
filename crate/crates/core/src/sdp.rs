//! Dense primal-dual interior-point solver for linear matrix inequalities.
//!
//! Solves
//!
//! ```text
//!   maximize    bᵀy
//!   subject to  Z = C − Σᵢ yᵢ Aᵢ ⪰ 0          (one dense symmetric block)
//!               z = c − Σᵢ yᵢ aᵢ ≥ 0          (linear block)
//! ```
//!
//! together with its dual `min ⟨C,X⟩ + cᵀx  s.t. ⟨Aᵢ,X⟩ + aᵢᵀx = bᵢ, X ⪰ 0,
//! x ≥ 0`. The method is an infeasible-start path-following scheme with the
//! HKM search direction and Mehrotra predictor-corrector steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::linalg::symmetric_eigenvalues;

/// Sparse symmetric matrix stored as upper-triangle triplets `(r, c, v)` with
/// `r <= c`; each off-diagonal triplet stands for both `(r,c)` and `(c,r)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymSparse {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        self.entries.push((r, c, v));
    }

    /// Merges duplicate positions and drops zeros.
    pub fn compress(&mut self) {
        self.entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        self.entries = out;
    }

    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(dim, dim);
        self.add_to(&mut m, 1.0);
        m
    }

    pub fn add_to(&self, m: &mut DMatrix<f64>, scale: f64) {
        for &(r, c, v) in &self.entries {
            m[(r, c)] += scale * v;
            if r != c {
                m[(c, r)] += scale * v;
            }
        }
    }

    /// `⟨self, W⟩` for a (not necessarily symmetric) dense `W`.
    pub fn inner(&self, w: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| {
                if r == c {
                    v * w[(r, r)]
                } else {
                    v * (w[(r, c)] + w[(c, r)])
                }
            })
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| if r == c { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }
}

/// One row `z = constant − Σ coeff · y_var` of the linear block.
#[derive(Clone, Debug, PartialEq)]
pub struct LpRow {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct LmiProblem {
    pub dim: usize,
    pub c: SymSparse,
    pub a: Vec<SymSparse>,
    pub b: Vec<f64>,
    pub lp: Vec<LpRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Absolute tolerance on `|primal − dual|`.
    pub gap_tol: f64,
    /// Relative tolerance on the equality residuals of both sides.
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-7,
            feas_tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpmStatus {
    Converged,
    /// The LMI side could not be made feasible.
    Infeasible,
    /// Iteration limit or numerical stall before reaching the tolerances.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct IpmResult {
    pub status: IpmStatus,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_lp: DVector<f64>,
    /// `⟨C,X⟩ + cᵀx`, an upper bound on the maximum when `X` is feasible.
    pub primal_objective: f64,
    /// `bᵀy`.
    pub dual_objective: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub iterations: usize,
}

impl IpmResult {
    pub fn gap(&self) -> f64 {
        (self.primal_objective - self.dual_objective).abs()
    }
}

struct Prepared<'a> {
    p: &'a LmiProblem,
    /// Sorted support indices of each `A_i` and the dense restriction onto it.
    support: Vec<Vec<usize>>,
    local: Vec<DMatrix<f64>>,
    /// Linear-block coefficients per variable.
    lp_cols: Vec<Vec<(usize, f64)>>,
    c_dense: DMatrix<f64>,
    c_lp: DVector<f64>,
}

impl<'a> Prepared<'a> {
    fn new(p: &'a LmiProblem) -> Self {
        let mut support = Vec::with_capacity(p.a.len());
        let mut local = Vec::with_capacity(p.a.len());
        for a in &p.a {
            let mut idx: Vec<usize> = a.entries.iter().flat_map(|&(r, c, _)| [r, c]).collect();
            idx.sort_unstable();
            idx.dedup();
            let k = idx.len();
            let mut m = DMatrix::zeros(k, k);
            for &(r, c, v) in &a.entries {
                let (i, j) = (
                    idx.binary_search(&r).unwrap(),
                    idx.binary_search(&c).unwrap(),
                );
                m[(i, j)] += v;
                if i != j {
                    m[(j, i)] += v;
                }
            }
            support.push(idx);
            local.push(m);
        }
        let mut lp_cols = vec![Vec::new(); p.a.len()];
        for (l, row) in p.lp.iter().enumerate() {
            for &(i, v) in &row.terms {
                lp_cols[i].push((l, v));
            }
        }
        Self {
            p,
            support,
            local,
            lp_cols,
            c_dense: p.c.to_dense(p.dim),
            c_lp: DVector::from_iterator(p.lp.len(), p.lp.iter().map(|r| r.constant)),
        }
    }

    fn m(&self) -> usize {
        self.p.a.len()
    }

    /// `Σ yᵢ Aᵢ` as a dense matrix.
    fn apply_a(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p.dim, self.p.dim);
        for (a, &yi) in self.p.a.iter().zip(y.iter()) {
            if yi != 0.0 {
                a.add_to(&mut out, yi);
            }
        }
        out
    }

    fn apply_a_lp(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.p.lp.len());
        for (l, row) in self.p.lp.iter().enumerate() {
            out[l] = row.terms.iter().map(|&(i, v)| v * y[i]).sum();
        }
        out
    }

    /// `(⟨Aᵢ, W⟩ + aᵢᵀw)ᵢ`.
    fn adjoint(&self, w: &DMatrix<f64>, w_lp: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.m(),
            (0..self.m()).map(|i| {
                self.p.a[i].inner(w) + self.lp_cols[i].iter().map(|&(l, v)| v * w_lp[l]).sum::<f64>()
            }),
        )
    }

    /// HKM Schur complement `M_ij = tr(Aᵢ X Aⱼ Z⁻¹) + Σ_l a_il a_jl x_l / z_l`.
    fn schur(&self, x: &DMatrix<f64>, zinv: &DMatrix<f64>, ratio_lp: &DVector<f64>) -> DMatrix<f64> {
        let m = self.m();
        let n = self.p.dim;
        let mut schur = DMatrix::zeros(m, m);
        let mut v = DMatrix::zeros(n, n);
        for i in 0..m {
            let idx = &self.support[i];
            let k = idx.len();
            // V = Z⁻¹[:, K] · (A_K · X[K, :])
            let xk = DMatrix::from_fn(k, n, |a, b| x[(idx[a], b)]);
            let t = &self.local[i] * xk;
            let zk = DMatrix::from_fn(n, k, |a, b| zinv[(a, idx[b])]);
            v.gemm(1.0, &zk, &t, 0.0);
            for j in i..m {
                let val = self.p.a[j].inner(&v);
                schur[(i, j)] = val;
            }
        }
        for (row, ratio) in self.p.lp.iter().zip(ratio_lp.iter()) {
            for &(i, vi) in &row.terms {
                for &(j, vj) in &row.terms {
                    if j >= i {
                        schur[(i, j)] += vi * vj * ratio;
                    }
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                schur[(i, j)] = schur[(j, i)];
            }
        }
        schur
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Largest `α` with `S + α dS ⪰ 0`, given the Cholesky factor of `S`.
fn max_step_psd(chol: &Cholesky<f64, Dyn>, ds: &DMatrix<f64>) -> f64 {
    let l = chol.l();
    // L⁻¹ dS L⁻ᵀ
    let tmp = l
        .solve_lower_triangular(ds)
        .expect("cholesky factor is nonsingular");
    let scaled = l
        .solve_lower_triangular(&tmp.transpose())
        .expect("cholesky factor is nonsingular");
    let mut scaled = scaled;
    symmetrize(&mut scaled);
    let lmin = symmetric_eigenvalues(&scaled)[0];
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn max_step_lp(s: &DVector<f64>, ds: &DVector<f64>) -> f64 {
    s.iter()
        .zip(ds.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn factor_schur(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some(ch);
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut shift = 1e-14 * scale;
    for _ in 0..8 {
        let mut reg = m.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += shift;
        }
        if let Some(ch) = Cholesky::new(reg) {
            return Some(ch);
        }
        shift *= 100.0;
    }
    None
}

pub fn solve_lmi(p: &LmiProblem, opts: &SolverOptions) -> IpmResult {
    let prep = Prepared::new(p);
    let n = p.dim;
    let m = p.a.len();
    let nl = p.lp.len();
    let b = DVector::from_column_slice(&p.b);
    let b_norm = b.norm();
    let c_norm = p.c.frobenius_norm() + prep.c_lp.norm();

    let a_norm_max = p
        .a
        .iter()
        .map(|a| a.frobenius_norm())
        .fold(0.0, f64::max);
    let xi = (n as f64)
        .sqrt()
        .max(10.0)
        .max(
            p.a.iter()
                .zip(p.b.iter())
                .map(|(a, bi)| n as f64 * (1.0 + bi.abs()) / (1.0 + a.frobenius_norm()))
                .fold(0.0, f64::max),
        );
    let zeta = (n as f64).sqrt().max(10.0).max(a_norm_max).max(c_norm);

    let mut x = DMatrix::<f64>::identity(n, n) * xi;
    let mut z = DMatrix::<f64>::identity(n, n) * zeta;
    let mut xl = DVector::from_element(nl, xi);
    let mut zl = DVector::from_element(nl, zeta);
    let mut y = DVector::<f64>::zeros(m);

    let nu = (n + nl) as f64;
    let mut status = IpmStatus::Stalled;
    let mut iterations = 0;
    let mut stall = 0;
    let mut best_pinf = f64::INFINITY;
    let mut dinf_hist = Vec::new();

    loop {
        let ay = prep.apply_a(&y);
        let rd = &prep.c_dense - &ay - &z;
        let rd_lp = &prep.c_lp - prep.apply_a_lp(&y) - &zl;
        let rp = &b - prep.adjoint(&x, &xl);
        let pobj = inner(&prep.c_dense, &x) + prep.c_lp.dot(&xl);
        let dobj = b.dot(&y);
        let pinf = rp.norm() / (1.0 + b_norm);
        let dinf = (rd.norm() + rd_lp.norm()) / (1.0 + c_norm);
        let mu = (inner(&x, &z) + xl.dot(&zl)) / nu;
        let gap = (pobj - dobj).abs();
        dinf_hist.push(dinf);

        if gap <= opts.gap_tol && pinf <= opts.feas_tol && dinf <= opts.feas_tol {
            status = IpmStatus::Converged;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        // The dual side (moment matrix) has no feasible point when X grows
        // along a direction with ⟨C,X⟩ < 0 while A(X) stays bounded.
        let x_norm = x.norm() + xl.norm();
        if dinf > 1e-6 && x_norm > 1e8 && pobj < -1e4 * (1.0 + dobj.abs()) {
            status = IpmStatus::Infeasible;
            break;
        }
        if pinf < best_pinf {
            best_pinf = pinf;
        }

        let z_chol = match Cholesky::new(z.clone()) {
            Some(c) => c,
            None => break,
        };
        let x_chol = match Cholesky::new(x.clone()) {
            Some(c) => c,
            None => break,
        };
        let zinv = z_chol.inverse();
        let ratio_lp = DVector::from_iterator(nl, xl.iter().zip(zl.iter()).map(|(a, b)| a / b));
        let schur = prep.schur(&x, &zinv, &ratio_lp);
        let Some(schur_chol) = factor_schur(&schur) else {
            break;
        };

        let x_rd_zinv = &x * &rd * &zinv;
        let lp_x_rd = DVector::from_iterator(nl, (0..nl).map(|l| xl[l] * rd_lp[l] / zl[l]));

        // Solves for one direction given the target σμ and corrector terms.
        let direction = |sigma_mu: f64,
                         corr: Option<(&DMatrix<f64>, &DVector<f64>)>|
         -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
            let mut h = &zinv * sigma_mu - &x_rd_zinv;
            let mut h_lp = DVector::from_iterator(nl, (0..nl).map(|l| sigma_mu / zl[l])) - &lp_x_rd;
            if let Some((c, c_lp)) = corr {
                h -= c;
                h_lp -= c_lp;
            }
            let rhs = &b - prep.adjoint(&h, &h_lp);
            let dy = schur_chol.solve(&rhs);
            let dz = &rd - prep.apply_a(&dy);
            let dz_lp = &rd_lp - prep.apply_a_lp(&dy);
            let mut dx = &zinv * sigma_mu - &x - &x * &dz * &zinv;
            if let Some((c, _)) = corr {
                dx -= c;
            }
            symmetrize(&mut dx);
            let mut dx_lp = DVector::zeros(nl);
            for l in 0..nl {
                dx_lp[l] = sigma_mu / zl[l] - xl[l] - xl[l] * dz_lp[l] / zl[l];
                if let Some((_, c_lp)) = corr {
                    dx_lp[l] -= c_lp[l];
                }
            }
            (dy, dx, dz, dx_lp, dz_lp)
        };

        // Predictor.
        let (_, dx_a, dz_a, dxl_a, dzl_a) = direction(0.0, None);
        let ap = max_step_psd(&x_chol, &dx_a)
            .min(max_step_lp(&xl, &dxl_a))
            .min(1.0);
        let ad = max_step_psd(&z_chol, &dz_a)
            .min(max_step_lp(&zl, &dzl_a))
            .min(1.0);
        let mu_aff = (inner(&(&x + &dx_a * ap), &(&z + &dz_a * ad))
            + (&xl + &dxl_a * ap).dot(&(&zl + &dzl_a * ad)))
            / nu;
        let expo = (3.0f64).max(3.0 * ap.min(ad).powi(2));
        let sigma = (mu_aff / mu).max(0.0).powf(expo).min(1.0);

        // Corrector.
        let corr = &dx_a * &dz_a * &zinv;
        let corr_lp = DVector::from_iterator(nl, (0..nl).map(|l| dxl_a[l] * dzl_a[l] / zl[l]));
        let (dy, dx, dz, dxl, dzl) = direction(sigma * mu, Some((&corr, &corr_lp)));

        let ap_max = max_step_psd(&x_chol, &dx).min(max_step_lp(&xl, &dxl));
        let ad_max = max_step_psd(&z_chol, &dz).min(max_step_lp(&zl, &dzl));
        let gamma = 0.9 + 0.09 * ap.min(ad);
        let ap = (gamma * ap_max).min(1.0);
        let ad = (gamma * ad_max).min(1.0);

        x += &dx * ap;
        xl += &dxl * ap;
        y += &dy * ad;
        z += &dz * ad;
        zl += &dzl * ad;
        symmetrize(&mut x);
        symmetrize(&mut z);
        iterations += 1;

        if ap.min(ad) < 1e-10 {
            stall += 1;
            if stall >= 3 {
                break;
            }
        } else {
            stall = 0;
        }
    }

    let ay = prep.apply_a(&y);
    let rd = &prep.c_dense - &ay - &z;
    let rd_lp = &prep.c_lp - prep.apply_a_lp(&y) - &zl;
    let rp = &b - prep.adjoint(&x, &xl);
    let dinf = (rd.norm() + rd_lp.norm()) / (1.0 + c_norm);
    if status == IpmStatus::Stalled && dinf > 1e-6 {
        status = IpmStatus::Infeasible;
    }
    IpmResult {
        status,
        primal_objective: inner(&prep.c_dense, &x) + prep.c_lp.dot(&xl),
        dual_objective: b.dot(&y),
        primal_infeasibility: rp.norm() / (1.0 + b_norm),
        dual_infeasibility: dinf,
        y,
        x,
        x_lp: xl,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// max y s.t. [[1, y], [y, 1]] ⪰ 0  →  y = 1.
    #[test]
    fn two_by_two_lmi() {
        let mut c = SymSparse::default();
        c.push(0, 0, 1.0);
        c.push(1, 1, 1.0);
        let mut a = SymSparse::default();
        a.push(0, 1, -1.0);
        let p = LmiProblem {
            dim: 2,
            c,
            a: vec![a],
            b: vec![1.0],
            lp: vec![],
        };
        let r = solve_lmi(&p, &SolverOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert!((r.dual_objective - 1.0).abs() < 1e-7, "{r:?}");
        assert!(r.gap() <= 1e-7);
    }

    /// max y1 + y2 s.t. diag(1 − y1, 2 − y2) ⪰ 0, y1 ≤ 0.5 via the linear block.
    #[test]
    fn diagonal_with_linear_bound() {
        let mut c = SymSparse::default();
        c.push(0, 0, 1.0);
        c.push(1, 1, 2.0);
        let mut a1 = SymSparse::default();
        a1.push(0, 0, 1.0);
        let mut a2 = SymSparse::default();
        a2.push(1, 1, 1.0);
        let p = LmiProblem {
            dim: 2,
            c,
            a: vec![a1, a2],
            b: vec![1.0, 1.0],
            lp: vec![LpRow {
                constant: 0.5,
                terms: vec![(0, 1.0)],
            }],
        };
        let r = solve_lmi(&p, &SolverOptions::default());
        assert_eq!(r.status, IpmStatus::Converged);
        assert!((r.dual_objective - 2.5).abs() < 1e-7, "{r:?}");
    }

    /// [[1, y], [y, 0]] ⪰ 0 forces y = 0: no interior on the LMI side.
    #[test]
    fn lmi_without_interior() {
        let mut c = SymSparse::default();
        c.push(0, 0, 1.0);
        let mut a = SymSparse::default();
        a.push(0, 1, -1.0);
        let p = LmiProblem {
            dim: 2,
            c,
            a: vec![a],
            b: vec![1.0],
            lp: vec![],
        };
        let r = solve_lmi(&p, &SolverOptions::default());
        assert!(r.dual_objective.abs() < 1e-5, "{r:?}");
    }

    /// diag(−1 + 0·y) can never be PSD.
    #[test]
    fn infeasible_lmi() {
        let mut c = SymSparse::default();
        c.push(0, 0, -1.0);
        c.push(1, 1, 1.0);
        let mut a = SymSparse::default();
        a.push(1, 1, 1.0);
        let p = LmiProblem {
            dim: 2,
            c,
            a: vec![a],
            b: vec![0.0],
            lp: vec![],
        };
        let r = solve_lmi(&p, &SolverOptions::default());
        assert_eq!(r.status, IpmStatus::Infeasible, "{r:?}");
    }
}
