//! Facial reduction of a moment problem.
//!
//! Exact statistics and Gram data usually force the moment matrix to be
//! singular (a vanishing click probability, linearly dependent states, a
//! saturated overlap bound). Without an interior point the dual certificate
//! diverges. Here forced kernel vectors are found from principal blocks whose
//! entries are fully determined by the constraints: a constant PSD block with
//! a null vector `u` forces `Γu = 0`. Those linear equations are eliminated
//! from the variables, and one pivot row/column per kernel vector is dropped,
//! which keeps the remaining LMI sparse. Repeats until nothing new appears.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::problem::{AffineConstraint, MomentProblem, Part};

/// Eigenvalues of a constant block below this (relative) are treated as zero.
const NULL_TOL: f64 = 1e-10;
/// A constant block with an eigenvalue below `-NEG_TOL` cannot be PSD.
const NEG_TOL: f64 = 1e-9;
/// Relative singular-value cutoff for identically vanishing blocks.
const SVD_NULL_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-7;
const DROP_TOL: f64 = 1e-15;

/// `c + Σ coeff · t_var` over the free variables.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Affine {
    pub c: f64,
    pub terms: Vec<(usize, f64)>,
}

impl Affine {
    fn constant(c: f64) -> Self {
        Self { c, terms: Vec::new() }
    }

    fn var(v: usize) -> Self {
        Self {
            c: 0.0,
            terms: vec![(v, 1.0)],
        }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    fn coeff(&self, v: usize) -> f64 {
        self.terms
            .binary_search_by_key(&v, |t| t.0)
            .map_or(0.0, |i| self.terms[i].1)
    }

    fn add_scaled(&mut self, other: &Affine, s: f64) {
        self.c += s * other.c;
        let mut out = Vec::with_capacity(self.terms.len() + other.terms.len());
        let (mut i, mut j) = (0, 0);
        while i < self.terms.len() || j < other.terms.len() {
            let a = self.terms.get(i);
            let b = other.terms.get(j);
            let (v, x) = match (a, b) {
                (Some(&(va, xa)), Some(&(vb, xb))) if va == vb => {
                    i += 1;
                    j += 1;
                    (va, xa + s * xb)
                }
                (Some(&(va, xa)), Some(&(vb, _))) if va < vb => {
                    i += 1;
                    (va, xa)
                }
                (Some(&(va, xa)), None) => {
                    i += 1;
                    (va, xa)
                }
                (_, Some(&(vb, xb))) => {
                    j += 1;
                    (vb, s * xb)
                }
                (None, None) => unreachable!(),
            };
            if x.abs() > DROP_TOL {
                out.push((v, x));
            }
        }
        self.terms = out;
    }

    pub fn eval(&self, t: &[f64]) -> f64 {
        self.c + self.terms.iter().map(|&(v, x)| x * t[v]).sum::<f64>()
    }
}

/// Outcome of the reduction.
#[derive(Clone, Debug)]
pub(crate) struct Reduced {
    /// Expressions for the real and imaginary part of each class,
    /// interleaved: `parts[2c]` is Re, `parts[2c + 1]` is Im.
    pub parts: Vec<Affine>,
    pub nvars: usize,
    /// Moment-matrix indices kept in the cone constraint, ascending.
    pub kept: Vec<usize>,
    /// Bounds carried over from the problem, on class parts.
    pub bounds: BTreeMap<usize, (f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Infeasible(pub String);

struct Reducer<'a> {
    problem: &'a MomentProblem,
    parts: Vec<Affine>,
    /// Class parts mentioning each variable (may hold stale entries).
    occurs: Vec<Vec<usize>>,
    /// Kernel vectors in reduced echelon form, keyed by pivot index.
    kernel: Vec<(usize, Vec<Complex64>)>,
    dropped: Vec<bool>,
}

impl<'a> Reducer<'a> {
    fn new(problem: &'a MomentProblem) -> Result<Self, Infeasible> {
        let nc = problem.classes().len();
        let mut fixes: BTreeMap<usize, f64> = BTreeMap::new();
        for c in problem.constraints() {
            if let AffineConstraint::Fix { class, part, value } = *c {
                let k = part_index(class, part);
                if let Some(&old) = fixes.get(&k) {
                    if (old - value).abs() > 1e-9 {
                        return Err(Infeasible(format!("class {class} fixed to both {old} and {value}")));
                    }
                }
                fixes.insert(k, value);
            }
        }
        let mut parts = Vec::with_capacity(2 * nc);
        let mut occurs = Vec::new();
        for (id, cl) in problem.classes().iter().enumerate() {
            for part in [Part::Re, Part::Im] {
                let k = part_index(id, part);
                let e = match fixes.get(&k) {
                    Some(&v) => {
                        if part == Part::Im && cl.real && v.abs() > 1e-9 {
                            return Err(Infeasible(format!("real class {id} has imaginary part fixed to {v}")));
                        }
                        Affine::constant(v)
                    }
                    None if part == Part::Im && cl.real => Affine::constant(0.0),
                    None => {
                        occurs.push(vec![k]);
                        Affine::var(occurs.len() - 1)
                    }
                };
                parts.push(e);
            }
        }
        Ok(Self {
            problem,
            parts,
            occurs,
            kernel: Vec::new(),
            dropped: vec![false; problem.dim()],
        })
    }

    /// Complex affine value of entry `(p, q)` as `(re, im)` expressions.
    fn entry(&self, p: usize, q: usize) -> (&Affine, &Affine, f64) {
        let (c, conj) = self.problem.class_at(p, q);
        let sign = if conj { -1.0 } else { 1.0 };
        (&self.parts[2 * c], &self.parts[2 * c + 1], sign)
    }

    fn determined(&self, p: usize, q: usize) -> bool {
        let (re, im, _) = self.entry(p, q);
        re.is_constant() && im.is_constant()
    }

    fn value(&self, p: usize, q: usize) -> Complex64 {
        let (re, im, s) = self.entry(p, q);
        Complex64::new(re.c, s * im.c)
    }

    /// Imposes `eq = 0` by eliminating its largest-coefficient variable.
    fn impose(&mut self, eq: Affine) -> Result<(), Infeasible> {
        let Some(&(v, a)) = eq
            .terms
            .iter()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .filter(|t| t.1.abs() > PIVOT_TOL)
        else {
            if eq.c.abs() > RESIDUAL_TOL {
                return Err(Infeasible(format!("linear relation violated by {:.3e}", eq.c)));
            }
            return Ok(());
        };
        // t_v = −(eq − a t_v) / a
        let mut sub = eq;
        sub.terms.retain(|t| t.0 != v);
        sub.c /= -a;
        for t in &mut sub.terms {
            t.1 /= -a;
        }
        let mut users = std::mem::take(&mut self.occurs[v]);
        users.sort_unstable();
        users.dedup();
        for k in users {
            let x = self.parts[k].coeff(v);
            if x == 0.0 {
                continue;
            }
            self.parts[k].terms.retain(|t| t.0 != v);
            self.parts[k].add_scaled(&sub, x);
            for &(w, _) in &sub.terms {
                self.occurs[w].push(k);
            }
        }
        Ok(())
    }

    /// Adds `u` to the kernel if it is new; returns the reduced vector.
    fn add_kernel(&mut self, mut u: Vec<Complex64>) -> Option<Vec<Complex64>> {
        let scale = u.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (p, k) in &self.kernel {
            let f = u[*p];
            if f != Complex64::new(0.0, 0.0) {
                for (a, b) in u.iter_mut().zip(k) {
                    *a -= f * b;
                }
            }
        }
        let (piv, big) = u
            .iter()
            .enumerate()
            .map(|(i, z)| (i, z.norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if big <= 1e-8 * scale.max(1e-300) {
            return None;
        }
        let inv = u[piv].inv();
        for a in u.iter_mut() {
            *a *= inv;
        }
        for (_, k) in self.kernel.iter_mut() {
            let f = k[piv];
            if f != Complex64::new(0.0, 0.0) {
                for (a, b) in k.iter_mut().zip(&u) {
                    *a -= f * b;
                }
            }
        }
        self.dropped[piv] = true;
        self.kernel.push((piv, u.clone()));
        Some(u)
    }

    /// Imposes `Γu = 0` row by row.
    fn impose_kernel(&mut self, u: &[Complex64]) -> Result<(), Infeasible> {
        let d = self.problem.dim();
        let support: Vec<usize> = (0..d).filter(|&q| u[q].norm() > 0.0).collect();
        for p in 0..d {
            // Each equation is built after the previous elimination so it
            // only mentions live variables.
            for imag in [false, true] {
                let eq = self.row_equation(p, &support, u, imag);
                self.impose(eq)?;
            }
        }
        Ok(())
    }

    /// Real or imaginary part of `(Γu)_p`.
    fn row_equation(&self, p: usize, support: &[usize], u: &[Complex64], imag: bool) -> Affine {
        let mut eq = Affine::default();
        for &q in support {
            let (gr, gi, s) = self.entry(p, q);
            let z = u[q];
            // (gr + i s gi)(zr + i zi)
            if imag {
                eq.add_scaled(gr, z.im);
                eq.add_scaled(gi, s * z.re);
            } else {
                eq.add_scaled(gr, z.re);
                eq.add_scaled(gi, -s * z.im);
            }
        }
        eq
    }

    /// Constant principal blocks found greedily from each seed index.
    fn candidate_blocks(&self) -> Vec<Vec<usize>> {
        let problem = self.problem;
        let s = problem.block_size();
        let n = problem.n();
        // Monomial-major order puts the Gram block first.
        let order: Vec<usize> = (0..s)
            .flat_map(|i| (0..n).map(move |x| problem.index(x, i)))
            .filter(|&p| !self.dropped[p] && self.determined(p, p))
            .collect();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for seed in 0..order.len() {
            let mut block = vec![order[seed]];
            for &p in order.iter().skip(seed + 1).chain(order.iter().take(seed)) {
                if block.iter().all(|&q| self.determined(p, q)) {
                    block.push(p);
                }
            }
            if block.len() > 1 || self.value(block[0], block[0]).re.abs() <= NULL_TOL {
                block.sort_unstable();
                if !blocks.contains(&block) {
                    blocks.push(block);
                }
            }
        }
        // One column of blocks per monomial: `Σ_x c_x S|ψ_x⟩ = 0` relations.
        for i in 0..s {
            let block: Vec<usize> = (0..n)
                .map(|x| problem.index(x, i))
                .filter(|&p| !self.dropped[p])
                .collect();
            if block.len() > 1 && !blocks.contains(&block) {
                blocks.push(block);
            }
        }
        blocks
    }

    /// Vectors `v` with `Γ_JJ(t) v = 0` for every `t`, so `v†Γv` vanishes
    /// identically. A constant block must also be PSD.
    fn block_kernel(&self, block: &[usize]) -> Result<Vec<DVector<Complex64>>, Infeasible> {
        let k = block.len();
        let f0 = DMatrix::from_fn(k, k, |a, b| self.value(block[a], block[b]));
        let mut coeffs: BTreeMap<usize, DMatrix<Complex64>> = BTreeMap::new();
        for (a, &p) in block.iter().enumerate() {
            for (b, &q) in block.iter().enumerate() {
                let (re, im, s) = self.entry(p, q);
                for &(v, x) in &re.terms {
                    coeffs.entry(v).or_insert_with(|| DMatrix::zeros(k, k))[(a, b)].re += x;
                }
                for &(v, x) in &im.terms {
                    coeffs.entry(v).or_insert_with(|| DMatrix::zeros(k, k))[(a, b)].im += s * x;
                }
            }
        }
        if coeffs.is_empty() {
            let eig = f0.symmetric_eigen();
            let top = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b));
            let mut out = Vec::new();
            for (j, &lam) in eig.eigenvalues.iter().enumerate() {
                if lam < -NEG_TOL * top {
                    return Err(Infeasible(format!("constant block has eigenvalue {lam:.3e}")));
                }
                if lam <= NULL_TOL * top {
                    out.push(eig.eigenvectors.column(j).into_owned());
                }
            }
            return Ok(out);
        }
        let rows = (coeffs.len() + 1) * k;
        let mut stacked = DMatrix::<Complex64>::zeros(rows.max(k), k);
        stacked.rows_mut(0, k).copy_from(&f0);
        for (i, m) in coeffs.values().enumerate() {
            stacked.rows_mut((i + 1) * k, k).copy_from(m);
        }
        let svd = stacked.svd(false, true);
        let vt = svd.v_t.expect("requested V");
        let top = svd.singular_values.iter().fold(1.0f64, |a, &b| a.max(b));
        Ok(svd
            .singular_values
            .iter()
            .enumerate()
            .filter(|&(_, &sv)| sv <= SVD_NULL_TOL * top)
            .map(|(j, _)| vt.row(j).adjoint())
            .collect())
    }

    fn run(mut self, search: bool) -> Result<Reduced, Infeasible> {
        let d = self.problem.dim();
        while search {
            let mut found = Vec::new();
            for block in self.candidate_blocks() {
                for v in self.block_kernel(&block)? {
                    let mut u = vec![Complex64::new(0.0, 0.0); d];
                    for (a, &p) in block.iter().enumerate() {
                        u[p] = v[a];
                    }
                    if let Some(u) = self.add_kernel(u) {
                        found.push(u);
                    }
                }
            }
            if found.is_empty() {
                break;
            }
            for u in &found {
                self.impose_kernel(u)?;
            }
        }
        // Renumber the surviving variables.
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &self.parts {
            for &(v, _) in &e.terms {
                let next = map.len();
                map.entry(v).or_insert(next);
            }
        }
        let mut order: Vec<usize> = map.keys().copied().collect();
        order.sort_unstable();
        let renum: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        for e in &mut self.parts {
            for t in &mut e.terms {
                t.0 = renum[&t.0];
            }
        }
        let mut bounds: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for c in self.problem.constraints() {
            if let AffineConstraint::Bound { class, part, lo, hi } = *c {
                let e = bounds.entry(part_index(class, part)).or_insert((f64::NEG_INFINITY, f64::INFINITY));
                e.0 = e.0.max(lo);
                e.1 = e.1.min(hi);
            }
        }
        for (&k, &(lo, hi)) in &bounds {
            if lo > hi + 1e-9 {
                return Err(Infeasible(format!("empty range [{lo}, {hi}]")));
            }
            let e = &self.parts[k];
            if e.is_constant() && (e.c < lo - RESIDUAL_TOL || e.c > hi + RESIDUAL_TOL) {
                return Err(Infeasible(format!("value {} outside [{lo}, {hi}]", e.c)));
            }
        }
        Ok(Reduced {
            parts: self.parts,
            nvars: order.len(),
            kept: (0..d).filter(|&p| !self.dropped[p]).collect(),
            bounds,
        })
    }
}

pub(crate) fn part_index(class: usize, part: Part) -> usize {
    2 * class + usize::from(part == Part::Im)
}

/// Reduces `problem`. With `search = false` the fixed parts are still
/// substituted but every index is kept.
pub(crate) fn reduce(problem: &MomentProblem, search: bool) -> Result<Reduced, Infeasible> {
    Reducer::new(problem)?.run(search)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::monomial::{generate_monomials, Monomial};
    use crate::moment::problem::{build_problem, GramSpec};
    use crate::protocol::{gram_of_family, honest_stats, loss_only_stats, qubit_states, ChannelParams};
    use std::f64::consts::PI;

    #[test]
    fn affine_arithmetic() {
        let mut a = Affine { c: 1.0, terms: vec![(0, 2.0), (3, 1.0)] };
        let b = Affine { c: -1.0, terms: vec![(1, 1.0), (3, -1.0)] };
        a.add_scaled(&b, 1.0);
        assert_eq!(a, Affine { c: 0.0, terms: vec![(0, 2.0), (1, 1.0)] });
        assert_eq!(a.eval(&[1.0, 2.0, 0.0, 0.0]), 4.0);
    }

    #[test]
    fn vanishing_clicks_drop_rows() {
        // λ = 0 gives p0(x,x) = 0, so B_x|ψ_x⟩ = 0.
        let g = gram_of_family(&qubit_states(2, PI / 4.0).unwrap());
        let stats = loss_only_stats(&g, 0.8).unwrap();
        let mono = generate_monomials(2, 1, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let r = reduce(&p, true).unwrap();
        for x in 0..2 {
            let idx = p.index(x, mono.position(&Monomial::bob(x)).unwrap());
            assert!(!r.kept.contains(&idx));
        }
        assert!(r.kept.len() < p.dim());
    }

    #[test]
    fn dependent_states_drop_one_row_per_monomial() {
        // Three qubit states span two dimensions.
        let g = gram_of_family(&qubit_states(3, 1.0).unwrap());
        let stats = honest_stats(3, 1.0, ChannelParams::new(0.8, 0.1).unwrap()).unwrap();
        let mono = generate_monomials(3, 1, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let r = reduce(&p, true).unwrap();
        assert_eq!(r.kept.len(), 2 * mono.len());
    }

    #[test]
    fn without_search_keeps_everything() {
        let g = gram_of_family(&qubit_states(3, 1.0).unwrap());
        let stats = loss_only_stats(&g, 0.8).unwrap();
        let mono = generate_monomials(3, 1, true).unwrap();
        let p = build_problem(&mono, &GramSpec::Exact(g), &stats).unwrap();
        let r = reduce(&p, false).unwrap();
        assert_eq!(r.kept.len(), p.dim());
    }
}
