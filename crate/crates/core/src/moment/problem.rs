//! Assembly of the moment-matrix relaxation for the guessing probability.
//!
//! The moment matrix has `n × n` blocks of size `s` (the monomial count);
//! entry `((x, i), (x', j))` is `⟨ψ_x|S_i† S_j|ψ_x'⟩`. Entries whose operator
//! words coincide after canonicalization share one complex variable (an
//! equality class). A class and its Hermitian conjugate `(x', x, w†)` are the
//! same variable, so each class is stored once under the smaller of the two
//! keys.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::protocol::{key_pairs, GramMatrix, StatTable};

use super::monomial::{canonicalize, Generator, Monomial, MonomialSet};

const INTERVAL_TOL: f64 = 1e-12;

/// Entrywise bounds on the real and imaginary parts of the Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramInterval {
    pub re_lo: DMatrix<f64>,
    pub re_hi: DMatrix<f64>,
    pub im_lo: DMatrix<f64>,
    pub im_hi: DMatrix<f64>,
}

impl GramInterval {
    /// Validates the bounds and pins the diagonal to exactly one.
    pub fn new(
        re_lo: DMatrix<f64>,
        re_hi: DMatrix<f64>,
        im_lo: DMatrix<f64>,
        im_hi: DMatrix<f64>,
    ) -> Result<Self> {
        let n = re_lo.nrows();
        for (name, m) in [("re_lo", &re_lo), ("re_hi", &re_hi), ("im_lo", &im_lo), ("im_hi", &im_hi)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if n < 2 {
            return Err(invalid("interval gram needs n >= 2"));
        }
        let mut iv = Self {
            re_lo,
            re_hi,
            im_lo,
            im_hi,
        };
        for i in 0..n {
            for j in 0..n {
                if iv.re_lo[(i, j)] > iv.re_hi[(i, j)] + INTERVAL_TOL
                    || iv.im_lo[(i, j)] > iv.im_hi[(i, j)] + INTERVAL_TOL
                {
                    return Err(invalid(format!("interval ({i},{j}) has lo > hi")));
                }
                if (iv.re_lo[(i, j)] - iv.re_lo[(j, i)]).abs() > INTERVAL_TOL
                    || (iv.re_hi[(i, j)] - iv.re_hi[(j, i)]).abs() > INTERVAL_TOL
                    || (iv.im_lo[(i, j)] + iv.im_hi[(j, i)]).abs() > INTERVAL_TOL
                {
                    return Err(invalid(format!(
                        "interval ({i},{j}) is not conjugate-symmetric with ({j},{i})"
                    )));
                }
            }
            iv.re_lo[(i, i)] = 1.0;
            iv.re_hi[(i, i)] = 1.0;
            iv.im_lo[(i, i)] = 0.0;
            iv.im_hi[(i, i)] = 0.0;
        }
        Ok(iv)
    }

    /// Zero-width intervals around `gram`.
    pub fn exact(gram: &GramMatrix) -> Self {
        Self::widened(gram, 0.0, 0.0).expect("zero-width interval is valid")
    }

    /// Off-diagonal intervals of total width `re_width` / `im_width`
    /// centred on the entries of `gram`.
    pub fn widened(gram: &GramMatrix, re_width: f64, im_width: f64) -> Result<Self> {
        if re_width < 0.0 || im_width < 0.0 {
            return Err(invalid("interval widths must be non-negative"));
        }
        let n = gram.n();
        let g = gram.matrix();
        let off = |i: usize, j: usize, w: f64| if i == j { 0.0 } else { w / 2.0 };
        Self::new(
            DMatrix::from_fn(n, n, |i, j| g[(i, j)].re - off(i, j, re_width)),
            DMatrix::from_fn(n, n, |i, j| g[(i, j)].re + off(i, j, re_width)),
            DMatrix::from_fn(n, n, |i, j| g[(i, j)].im - off(i, j, im_width)),
            DMatrix::from_fn(n, n, |i, j| g[(i, j)].im + off(i, j, im_width)),
        )
    }

    pub fn n(&self) -> usize {
        self.re_lo.nrows()
    }

    pub fn contains(&self, gram: &GramMatrix, tol: f64) -> bool {
        let n = self.n();
        gram.n() == n
            && (0..n).all(|i| {
                (0..n).all(|j| {
                    let z = gram.entry(i, j);
                    z.re >= self.re_lo[(i, j)] - tol
                        && z.re <= self.re_hi[(i, j)] + tol
                        && z.im >= self.im_lo[(i, j)] - tol
                        && z.im <= self.im_hi[(i, j)] + tol
                })
            })
    }

    pub fn max_width(&self) -> f64 {
        (&self.re_hi - &self.re_lo)
            .iter()
            .chain((&self.im_hi - &self.im_lo).iter())
            .fold(0.0, |a, &b| a.max(b))
    }
}

/// What is known about Alice's overlaps.
#[derive(Clone, Debug, PartialEq)]
pub enum GramSpec {
    Exact(GramMatrix),
    Interval(GramInterval),
}

impl GramSpec {
    pub fn n(&self) -> usize {
        match self {
            GramSpec::Exact(g) => g.n(),
            GramSpec::Interval(iv) => iv.n(),
        }
    }
}

/// `⟨ψ_row| word |ψ_col⟩`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MomentKey {
    pub row: usize,
    pub col: usize,
    pub word: Monomial,
}

impl MomentKey {
    pub fn conjugate(&self) -> Self {
        Self {
            row: self.col,
            col: self.row,
            word: self.word.adjoint(),
        }
    }

    /// Representative key and whether `self` is its conjugate.
    pub fn normalized(&self) -> (Self, bool) {
        let conj = self.conjugate();
        if conj < *self {
            (conj, true)
        } else {
            (self.clone(), false)
        }
    }
}

/// A position of the moment matrix (upper triangle, `p <= q`) and whether it
/// holds the conjugate of its class value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub p: usize,
    pub q: usize,
    pub conj: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentClass {
    pub key: MomentKey,
    /// Self-conjugate classes carry a real value.
    pub real: bool,
    pub entries: Vec<ClassEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Re,
    Im,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AffineConstraint {
    Fix { class: usize, part: Part, value: f64 },
    Bound { class: usize, part: Part, lo: f64, hi: f64 },
}

/// The relaxation: maximize `Σ coeff · Re(class)` over PSD moment matrices
/// that respect the equality classes and affine constraints.
#[derive(Clone, Debug)]
pub struct MomentProblem {
    n: usize,
    monomials: MonomialSet,
    classes: Vec<MomentClass>,
    class_index: HashMap<MomentKey, usize>,
    /// `(class, conj)` of every position, row-major over the full matrix.
    position: Vec<(u32, bool)>,
    constraints: Vec<AffineConstraint>,
    objective: Vec<(usize, f64)>,
}

impl MomentProblem {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn monomials(&self) -> &MonomialSet {
        &self.monomials
    }

    pub fn block_size(&self) -> usize {
        self.monomials.len()
    }

    /// Side length `n·s` of the moment matrix.
    pub fn dim(&self) -> usize {
        self.n * self.monomials.len()
    }

    pub fn classes(&self) -> &[MomentClass] {
        &self.classes
    }

    pub fn constraints(&self) -> &[AffineConstraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &[(usize, f64)] {
        &self.objective
    }

    pub fn index(&self, x: usize, i: usize) -> usize {
        x * self.monomials.len() + i
    }

    /// Class and conjugation flag of moment-matrix position `(p, q)`.
    pub fn class_at(&self, p: usize, q: usize) -> (usize, bool) {
        let (c, conj) = self.position[p * self.dim() + q];
        (c as usize, conj)
    }

    /// Class holding `⟨ψ_x| word |ψ_x'⟩`, if that moment appears in the matrix.
    pub fn find_class(&self, x: usize, x2: usize, word: &Monomial) -> Option<(usize, bool)> {
        let (key, conj) = MomentKey {
            row: x,
            col: x2,
            word: word.clone(),
        }
        .normalized();
        self.class_index.get(&key).map(|&c| (c, conj))
    }

    /// Objective value of a moment matrix.
    pub fn objective_value(&self, gamma: &DMatrix<Complex64>) -> f64 {
        let values = self.class_values(gamma);
        self.objective.iter().map(|&(c, w)| w * values[c].re).sum()
    }

    /// Class values read from the first entry of each class.
    pub fn class_values(&self, gamma: &DMatrix<Complex64>) -> Vec<Complex64> {
        self.classes
            .iter()
            .map(|cl| {
                let e = cl.entries[0];
                let v = gamma[(e.p, e.q)];
                if e.conj {
                    v.conj()
                } else {
                    v
                }
            })
            .collect()
    }

    /// Builds the moment matrix from one value per class.
    pub fn assemble(&self, values: &[Complex64]) -> DMatrix<Complex64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |p, q| {
            let (c, conj) = self.class_at(p, q);
            if conj {
                values[c].conj()
            } else {
                values[c]
            }
        })
    }

    /// Largest violation of Hermiticity, equality classes and affine
    /// constraints by `gamma`.
    pub fn max_violation(&self, gamma: &DMatrix<Complex64>) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        if gamma.nrows() != d || gamma.ncols() != d {
            return f64::INFINITY;
        }
        for p in 0..d {
            for q in 0..d {
                worst = worst.max((gamma[(p, q)] - gamma[(q, p)].conj()).norm());
            }
        }
        let values = self.class_values(gamma);
        for (cl, v) in self.classes.iter().zip(&values) {
            if cl.real {
                worst = worst.max(v.im.abs());
            }
            for e in &cl.entries {
                let g = gamma[(e.p, e.q)];
                let g = if e.conj { g.conj() } else { g };
                worst = worst.max((g - v).norm());
            }
        }
        for con in &self.constraints {
            let part = |c: usize, part: Part| match part {
                Part::Re => values[c].re,
                Part::Im => values[c].im,
            };
            let viol = match *con {
                AffineConstraint::Fix { class, part: pt, value } => (part(class, pt) - value).abs(),
                AffineConstraint::Bound { class, part: pt, lo, hi } => {
                    let v = part(class, pt);
                    (lo - v).max(v - hi).max(0.0)
                }
            };
            worst = worst.max(viol);
        }
        worst
    }

    /// Plain-text sparse listing of the problem.
    ///
    /// ```text
    /// rdiqkd-moment-problem 1
    /// n <n>
    /// monomials <s> <word> ... <word>
    /// classes <count>
    /// class <id> <row> <col> <word> <real|complex> <p:q[*]> ...
    /// constraints <count>
    /// fix <class> <re|im> <value>
    /// bound <class> <re|im> <lo> <hi>
    /// objective <count>
    /// term <class> <coefficient>
    /// ```
    ///
    /// Entry `p:q*` holds the conjugate of the class value. Words use `1`,
    /// `B<y>` and `E<r>` joined by `.`; floats are printed with full
    /// round-trip precision.
    pub fn to_sparse_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "rdiqkd-moment-problem 1");
        let _ = writeln!(out, "n {}", self.n);
        let _ = write!(out, "monomials {}", self.monomials.len());
        for m in self.monomials.monomials() {
            let _ = write!(out, " {m}");
        }
        out.push('\n');
        let _ = writeln!(out, "classes {}", self.classes.len());
        for (id, cl) in self.classes.iter().enumerate() {
            let _ = write!(
                out,
                "class {id} {} {} {} {}",
                cl.key.row,
                cl.key.col,
                cl.key.word,
                if cl.real { "real" } else { "complex" }
            );
            for e in &cl.entries {
                let _ = write!(out, " {}:{}{}", e.p, e.q, if e.conj { "*" } else { "" });
            }
            out.push('\n');
        }
        let _ = writeln!(out, "constraints {}", self.constraints.len());
        let part = |p: Part| if p == Part::Re { "re" } else { "im" };
        for c in &self.constraints {
            let _ = match *c {
                AffineConstraint::Fix { class, part: p, value } => {
                    writeln!(out, "fix {class} {} {value:?}", part(p))
                }
                AffineConstraint::Bound { class, part: p, lo, hi } => {
                    writeln!(out, "bound {class} {} {lo:?} {hi:?}", part(p))
                }
            };
        }
        let _ = writeln!(out, "objective {}", self.objective.len());
        for &(c, w) in &self.objective {
            let _ = writeln!(out, "term {c} {w:?}");
        }
        out
    }

    /// Parses [`MomentProblem::to_sparse_text`] output. Classes are rebuilt
    /// from the monomial list and checked against the listed ones.
    pub fn from_sparse_text(text: &str) -> Result<Self> {
        let perr = |m: &str| Error::Parse(m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = || lines.next().ok_or_else(|| perr("unexpected end of input"));
        if next()?.trim() != "rdiqkd-moment-problem 1" {
            return Err(perr("missing header"));
        }
        let n: usize = field(next()?, "n", 1)?[0].parse().map_err(|_| perr("bad n"))?;
        let mono_line = next()?;
        let toks: Vec<&str> = mono_line.split_whitespace().collect();
        if toks.first() != Some(&"monomials") {
            return Err(perr("expected monomials"));
        }
        let s: usize = toks.get(1).and_then(|t| t.parse().ok()).ok_or_else(|| perr("bad monomial count"))?;
        let monos = toks[2..]
            .iter()
            .map(|t| t.parse::<Monomial>())
            .collect::<Result<Vec<_>>>()?;
        if monos.len() != s {
            return Err(perr("monomial count mismatch"));
        }
        let set = MonomialSet::from_monomials(n, monos)?;
        let mut problem = Self::skeleton(set)?;

        let count: usize = field(next()?, "classes", 1)?[0].parse().map_err(|_| perr("bad class count"))?;
        if count != problem.classes.len() {
            return Err(perr("class count does not match the monomial basis"));
        }
        for id in 0..count {
            let line = next()?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 6 || toks[0] != "class" || toks[1].parse::<usize>().ok() != Some(id) {
                return Err(perr(&format!("bad class line '{line}'")));
            }
            let key = MomentKey {
                row: toks[2].parse().map_err(|_| perr("bad row"))?,
                col: toks[3].parse().map_err(|_| perr("bad col"))?,
                word: toks[4].parse()?,
            };
            if problem.classes[id].key != key || problem.classes[id].entries.len() != toks.len() - 6 {
                return Err(perr(&format!("class {id} does not match the monomial basis")));
            }
        }
        let count: usize = field(next()?, "constraints", 1)?[0].parse().map_err(|_| perr("bad constraint count"))?;
        let parse_part = |t: &str| match t {
            "re" => Ok(Part::Re),
            "im" => Ok(Part::Im),
            _ => Err(perr("bad part")),
        };
        let num = |t: &str| t.parse::<f64>().map_err(|_| perr("bad number"));
        for _ in 0..count {
            let line = next()?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let class: usize = toks.get(1).and_then(|t| t.parse().ok()).ok_or_else(|| perr("bad class id"))?;
            if class >= problem.classes.len() {
                return Err(perr("class id out of range"));
            }
            let con = match (toks.first().copied(), toks.len()) {
                (Some("fix"), 4) => AffineConstraint::Fix {
                    class,
                    part: parse_part(toks[2])?,
                    value: num(toks[3])?,
                },
                (Some("bound"), 5) => AffineConstraint::Bound {
                    class,
                    part: parse_part(toks[2])?,
                    lo: num(toks[3])?,
                    hi: num(toks[4])?,
                },
                _ => return Err(perr(&format!("bad constraint line '{line}'"))),
            };
            problem.constraints.push(con);
        }
        let count: usize = field(next()?, "objective", 1)?[0].parse().map_err(|_| perr("bad objective count"))?;
        for _ in 0..count {
            let t = field(next()?, "term", 2)?;
            let class: usize = t[0].parse().map_err(|_| perr("bad class id"))?;
            if class >= problem.classes.len() {
                return Err(perr("class id out of range"));
            }
            problem.objective.push((class, num(t[1])?));
        }
        Ok(problem)
    }

    /// Classes and positions for a monomial basis, without constraints.
    fn skeleton(monomials: MonomialSet) -> Result<Self> {
        let n = monomials.n();
        let s = monomials.len();
        let d = n * s;
        if d > u32::MAX as usize {
            return Err(invalid("moment matrix too large"));
        }
        let mut class_index: HashMap<MomentKey, usize> = HashMap::new();
        let mut classes: Vec<MomentClass> = Vec::new();
        let mut position = vec![(0u32, false); d * d];
        // Products S_i† S_j depend only on (i, j).
        let products: Vec<Monomial> = (0..s)
            .flat_map(|i| (0..s).map(move |j| (i, j)))
            .map(|(i, j)| monomials.get(i).adjoint_mul(monomials.get(j)))
            .collect();
        for x in 0..n {
            for x2 in 0..n {
                for i in 0..s {
                    for j in 0..s {
                        let p = x * s + i;
                        let q = x2 * s + j;
                        let key = MomentKey {
                            row: x,
                            col: x2,
                            word: products[i * s + j].clone(),
                        };
                        let (rep, conj) = key.normalized();
                        let id = *class_index.entry(rep.clone()).or_insert_with(|| {
                            let real = rep.conjugate() == rep;
                            classes.push(MomentClass {
                                key: rep,
                                real,
                                entries: Vec::new(),
                            });
                            classes.len() - 1
                        });
                        position[p * d + q] = (id as u32, conj);
                        if p <= q {
                            classes[id].entries.push(ClassEntry { p, q, conj });
                        }
                    }
                }
            }
        }
        // Renumber classes in key order for a deterministic layout.
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&a, &b| classes[a].key.cmp(&classes[b].key));
        let mut new_id = vec![0usize; classes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = new;
        }
        let mut sorted: Vec<Option<MomentClass>> = classes.into_iter().map(Some).collect();
        let classes: Vec<MomentClass> = order.iter().map(|&o| sorted[o].take().unwrap()).collect();
        for pos in position.iter_mut() {
            pos.0 = new_id[pos.0 as usize] as u32;
        }
        let class_index = classes.iter().enumerate().map(|(i, c)| (c.key.clone(), i)).collect();
        Ok(Self {
            n,
            monomials,
            classes,
            class_index,
            position,
            constraints: Vec::new(),
            objective: Vec::new(),
        })
    }
}

fn field<'a>(line: &'a str, name: &str, arity: usize) -> Result<Vec<&'a str>> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.first() != Some(&name) || toks.len() != arity + 1 {
        return Err(Error::Parse(format!("expected '{name}' line, got '{line}'")));
    }
    Ok(toks[1..].to_vec())
}

/// Builds the relaxation bounding `p(e = k, succ)`.
///
/// Objective (uniform inputs):
/// `1/(n²(n−1)) Σ_r Σ_k Σ_{y ∈ r} ⟨ψ_{r_k}| B_y E_{k|r} |ψ_{r_k}⟩`, with
/// `E_{1|r} = 1 − E_{0|r}`. Constraints: the Gram block (exact or boxed),
/// `⟨ψ_x|B_y|ψ_x⟩ = p0(x,y)`, equality classes and positivity.
pub fn build_problem(monomials: &MonomialSet, gram: &GramSpec, stats: &StatTable) -> Result<MomentProblem> {
    let n = monomials.n();
    if gram.n() != n || stats.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "monomials for n = {n}, gram n = {}, statistics n = {}",
            gram.n(),
            stats.n()
        )));
    }
    if monomials.position(&Monomial::identity()).is_none() {
        return Err(invalid("monomial basis must contain the identity"));
    }
    let mut problem = MomentProblem::skeleton(monomials.clone())?;
    let identity = Monomial::identity();

    let lookup = |problem: &MomentProblem, x: usize, x2: usize, w: &Monomial| {
        problem
            .find_class(x, x2, w)
            .ok_or_else(|| invalid(format!("moment <{x}|{w}|{x2}> is not in the moment matrix")))
    };

    // Overlaps.
    let mut constraints = Vec::new();
    for x in 0..n {
        for x2 in x..n {
            let (c, conj) = lookup(&problem, x, x2, &identity)?;
            debug_assert!(!conj);
            if x == x2 {
                constraints.push(AffineConstraint::Fix {
                    class: c,
                    part: Part::Re,
                    value: 1.0,
                });
                continue;
            }
            match gram {
                GramSpec::Exact(g) => {
                    let z = g.entry(x, x2);
                    constraints.push(AffineConstraint::Fix { class: c, part: Part::Re, value: z.re });
                    constraints.push(AffineConstraint::Fix { class: c, part: Part::Im, value: z.im });
                }
                GramSpec::Interval(iv) => {
                    for (part, lo, hi) in [
                        (Part::Re, iv.re_lo[(x, x2)], iv.re_hi[(x, x2)]),
                        (Part::Im, iv.im_lo[(x, x2)], iv.im_hi[(x, x2)]),
                    ] {
                        if hi - lo <= INTERVAL_TOL {
                            constraints.push(AffineConstraint::Fix { class: c, part, value: 0.5 * (lo + hi) });
                        } else {
                            constraints.push(AffineConstraint::Bound { class: c, part, lo, hi });
                        }
                    }
                }
            }
        }
    }

    // Observed statistics.
    for x in 0..n {
        for y in 0..n {
            let (c, _) = lookup(&problem, x, x, &Monomial::bob(y))?;
            constraints.push(AffineConstraint::Fix {
                class: c,
                part: Part::Re,
                value: stats.p0(x, y),
            });
        }
    }

    // Objective.
    let weight = 1.0 / ((n * n * (n - 1)) as f64);
    let mut objective: BTreeMap<usize, f64> = BTreeMap::new();
    for (r, (r0, r1)) in key_pairs(n).into_iter().enumerate() {
        for (k, x) in [(0usize, r0), (1, r1)] {
            for y in [r0, r1] {
                let be = canonicalize(&[Generator::Bob(y), Generator::Eve(r)]);
                let (c_be, _) = lookup(&problem, x, x, &be)?;
                if k == 0 {
                    *objective.entry(c_be).or_default() += weight;
                } else {
                    let (c_b, _) = lookup(&problem, x, x, &Monomial::bob(y))?;
                    *objective.entry(c_b).or_default() += weight;
                    *objective.entry(c_be).or_default() -= weight;
                }
            }
        }
    }
    problem.constraints = constraints;
    problem.objective = objective.into_iter().filter(|&(_, w)| w != 0.0).collect();
    Ok(problem)
}
