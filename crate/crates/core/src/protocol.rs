//! Prepared states, Gram matrices, channel models and the sifting arithmetic
//! that turns a table of conclusive-outcome probabilities into `p(succ)`,
//! the QBER and a key rate.
//!
//! Conventions used throughout the crate:
//! * `b = 0` is the conclusive outcome. Only `p(b=0|x,y)` is stored.
//! * Alice's key pairs `r = (r0, r1)` with `r0 < r1` are enumerated in
//!   lexicographic order, see [`key_pairs`].
//! * All inputs (`r`, `k`, `y`) are uniformly distributed.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

const NORM_TOL: f64 = 1e-12;
const HERMITIAN_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest one count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Number of key pairs `C(n, 2)`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// All pairs `(r0, r1)` with `r0 < r1`, in lexicographic order. The position
/// of a pair in this list is its index `r`.
pub fn key_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(pair_count(n));
    for r0 in 0..n {
        for r1 in r0 + 1..n {
            pairs.push((r0, r1));
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub enum FamilyKind {
    /// `cos(θ/2)|0⟩ + e^{2πix/n} sin(θ/2)|1⟩`.
    QubitRing { theta: f64 },
    /// Explicit unit vectors of a common (arbitrary) dimension.
    Explicit { amplitudes: Vec<Vec<C64>> },
}

/// Alice's `n` pure preparations.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFamily {
    n: usize,
    kind: FamilyKind,
}

impl StateFamily {
    pub fn qubit_ring(n: usize, theta: f64) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("need at least 2 states, got {n}")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(invalid(format!("theta must lie in [0, pi], got {theta}")));
        }
        Ok(Self {
            n,
            kind: FamilyKind::QubitRing { theta },
        })
    }

    pub fn explicit(amplitudes: Vec<Vec<C64>>) -> Result<Self> {
        let n = amplitudes.len();
        if n < 2 {
            return Err(invalid(format!("need at least 2 states, got {n}")));
        }
        let dim = amplitudes[0].len();
        if dim == 0 {
            return Err(invalid("state vectors must be non-empty"));
        }
        for (x, v) in amplitudes.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "state {x} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            let norm: f64 = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(invalid(format!("state {x} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            n,
            kind: FamilyKind::Explicit { amplitudes },
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &FamilyKind {
        &self.kind
    }

    pub fn dimension(&self) -> usize {
        match &self.kind {
            FamilyKind::QubitRing { .. } => 2,
            FamilyKind::Explicit { amplitudes } => amplitudes[0].len(),
        }
    }

    pub fn state(&self, x: usize) -> DVector<C64> {
        match &self.kind {
            FamilyKind::QubitRing { theta } => {
                let phase = C64::from_polar(1.0, 2.0 * PI * x as f64 / self.n as f64);
                DVector::from_vec(vec![
                    C64::new((theta / 2.0).cos(), 0.0),
                    phase * (theta / 2.0).sin(),
                ])
            }
            FamilyKind::Explicit { amplitudes } => DVector::from_vec(amplitudes[x].clone()),
        }
    }

    pub fn states(&self) -> Vec<DVector<C64>> {
        (0..self.n).map(|x| self.state(x)).collect()
    }

    /// Applies a common linear map to every state. The map must be an isometry
    /// for the result to be a valid family.
    pub fn transformed(&self, map: &DMatrix<C64>) -> Result<Self> {
        if map.ncols() != self.dimension() {
            return Err(Error::DimensionMismatch(format!(
                "map acts on dimension {}, states have dimension {}",
                map.ncols(),
                self.dimension()
            )));
        }
        let amplitudes = self
            .states()
            .iter()
            .map(|s| (map * s).iter().copied().collect())
            .collect();
        Self::explicit(amplitudes)
    }
}

/// Shorthand for [`StateFamily::qubit_ring`].
pub fn qubit_states(n: usize, theta: f64) -> Result<StateFamily> {
    StateFamily::qubit_ring(n, theta)
}

/// Hermitian, unit-diagonal, positive semidefinite matrix of overlaps
/// `G_ij = ⟨ψ_i|ψ_j⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<C64>,
}

impl GramMatrix {
    pub fn new(entries: DMatrix<C64>) -> Result<Self> {
        let n = entries.nrows();
        if n < 2 || entries.ncols() != n {
            return Err(Error::InvalidGram(format!(
                "expected a square matrix of size >= 2, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for i in 0..n {
            if (entries[(i, i)] - C64::new(1.0, 0.0)).norm() > HERMITIAN_TOL {
                return Err(Error::InvalidGram(format!(
                    "diagonal entry {i} is {}, expected 1",
                    entries[(i, i)]
                )));
            }
            for j in i + 1..n {
                if (entries[(j, i)] - entries[(i, j)].conj()).norm() > HERMITIAN_TOL {
                    return Err(Error::InvalidGram(format!("entry ({i},{j}) breaks Hermiticity")));
                }
            }
        }
        // Snap to exact Hermitian form before the spectral check.
        let mut entries = entries;
        for i in 0..n {
            entries[(i, i)] = C64::new(1.0, 0.0);
            for j in i + 1..n {
                entries[(j, i)] = entries[(i, j)].conj();
            }
        }
        let gram = Self { entries };
        let min = gram.eigenvalues()[0];
        if min < -PSD_TOL {
            return Err(Error::InvalidGram(format!(
                "not positive semidefinite, minimum eigenvalue {min:e}"
            )));
        }
        Ok(gram)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n, n))
    }

    /// `G_xx' = d` for every `x != x'`.
    pub fn constant_overlap(n: usize, d: f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new(1.0, 0.0)
            } else {
                C64::new(d, 0.0)
            }
        }))
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.entries
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        crate::linalg::hermitian_eigenvalues(&self.entries)
    }

    pub fn conj(&self) -> Self {
        Self {
            entries: self.entries.map(|z| z.conj()),
        }
    }
}

/// Gram matrix of a state family.
pub fn gram_of_family(family: &StateFamily) -> GramMatrix {
    let n = family.n();
    let entries = match family.kind() {
        FamilyKind::QubitRing { theta } => {
            let c2 = (theta / 2.0).cos().powi(2);
            let s2 = (theta / 2.0).sin().powi(2);
            DMatrix::from_fn(n, n, |i, j| {
                let phase = 2.0 * PI * (j as f64 - i as f64) / n as f64;
                C64::new(c2, 0.0) + C64::from_polar(s2, phase)
            })
        }
        FamilyKind::Explicit { .. } => {
            let states = family.states();
            DMatrix::from_fn(n, n, |i, j| states[i].dotc(&states[j]))
        }
    };
    GramMatrix::new(entries).expect("gram matrix of unit vectors is valid")
}

/// Smallest eigenvalue of `G` above `RANK_TOL * λ_max`.
pub fn lambda_min_nonzero(gram: &GramMatrix) -> f64 {
    let eig = gram.eigenvalues();
    let max = *eig.last().expect("non-empty spectrum");
    let cutoff = RANK_TOL * max;
    eig.into_iter()
        .find(|&l| l > cutoff)
        .expect("unit diagonal implies a positive eigenvalue")
}

/// Transmission `eta` and depolarizing fraction `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelParams {
    pub eta: f64,
    pub lambda: f64,
}

impl ChannelParams {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { eta, lambda })
    }

    pub fn lossy(eta: f64) -> Result<Self> {
        Self::new(eta, 0.0)
    }
}

/// Observed `p(b=0|x,y)`, rows indexed by the prepared state `x` and columns by
/// Bob's setting `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatTable {
    p0: DMatrix<f64>,
}

impl StatTable {
    pub fn new(p0: DMatrix<f64>) -> Result<Self> {
        let n = p0.nrows();
        if n < 2 || p0.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "statistics table must be n x n with n >= 2, got {}x{}",
                p0.nrows(),
                p0.ncols()
            )));
        }
        if let Some(bad) = p0.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { p0 })
    }

    pub fn n(&self) -> usize {
        self.p0.nrows()
    }

    pub fn p0(&self, x: usize, y: usize) -> f64 {
        self.p0[(x, y)]
    }

    pub fn p1(&self, x: usize, y: usize) -> f64 {
        1.0 - self.p0[(x, y)]
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.p0
    }
}

/// Honest qubit-ring statistics through a depolarizing channel followed by
/// an erasure channel.
pub fn honest_stats(n: usize, theta: f64, channel: ChannelParams) -> Result<StatTable> {
    StateFamily::qubit_ring(n, theta)?;
    let s2 = theta.sin().powi(2);
    let ChannelParams { eta, lambda } = channel;
    StatTable::new(DMatrix::from_fn(n, n, |x, y| {
        let phase = (PI * (x as f64 - y as f64) / n as f64).sin().powi(2);
        (eta * (lambda / 2.0 + (1.0 - lambda) * s2 * phase)).clamp(0.0, 1.0)
    }))
}

/// Honest statistics for arbitrary overlaps: Bob projects onto the complement
/// of `|ψ_y⟩`, the qubit depolarizing noise contributes `λ/2`.
pub fn honest_stats_for_gram(gram: &GramMatrix, channel: ChannelParams) -> StatTable {
    let n = gram.n();
    let ChannelParams { eta, lambda } = channel;
    StatTable::new(DMatrix::from_fn(n, n, |x, y| {
        (eta * (lambda / 2.0 + (1.0 - lambda) * (1.0 - gram.entry(x, y).norm_sqr())))
            .clamp(0.0, 1.0)
    }))
    .expect("probabilities are clamped")
}

/// Loss-only statistics `p0(x,y) = η(1 − |G_xy|²)`.
pub fn loss_only_stats(gram: &GramMatrix, eta: f64) -> Result<StatTable> {
    let channel = ChannelParams::lossy(eta)?;
    Ok(honest_stats_for_gram(gram, channel))
}

/// Probability that a round survives sifting, and the QBER when defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolStats {
    pub p_succ: f64,
    qber: Option<f64>,
}

impl ProtocolStats {
    /// Fails with [`Error::NoRawKey`] when no round survives sifting.
    pub fn qber(&self) -> Result<f64> {
        self.qber.ok_or(Error::NoRawKey)
    }

    pub fn has_raw_key(&self) -> bool {
        self.qber.is_some()
    }
}

/// Sifting arithmetic under uniform `r`, `k` and `y`. Bob decodes
/// `k̂ = 1 − j` when the conclusive setting is `y = r_j`, so errors are exactly
/// the conclusive events with `y = x`.
pub fn sifting_stats(stats: &StatTable) -> ProtocolStats {
    let n = stats.n();
    let mut kept = 0.0;
    let mut errors = 0.0;
    for (r0, r1) in key_pairs(n) {
        for x in [r0, r1] {
            kept += stats.p0(x, r0) + stats.p0(x, r1);
            errors += stats.p0(x, x);
        }
    }
    let weight = 1.0 / ((n * n * (n - 1)) as f64);
    let p_succ = kept * weight;
    let qber = if kept > 0.0 {
        Some((errors / kept).clamp(0.0, 1.0))
    } else {
        None
    };
    ProtocolStats { p_succ, qber }
}

/// `H₂(p)` in bits, with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    Ok(term(p) + term(1.0 - p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyRate {
    pub raw: f64,
    pub clipped: f64,
}

/// `R = [−log₂ p_g − H₂(QBER)] · p(succ)`, with `p_g` clamped to `[1/2, 1]`.
pub fn key_rate(pg_upper: f64, qber: f64, p_succ: f64) -> Result<KeyRate> {
    if pg_upper.is_nan() {
        return Err(invalid("guessing probability is NaN"));
    }
    if !(0.0..=1.0).contains(&p_succ) {
        return Err(invalid(format!("p_succ {p_succ} outside [0, 1]")));
    }
    let pg = clamp_guess(pg_upper);
    let raw = (-pg.log2() - binary_entropy(qber)?) * p_succ;
    Ok(KeyRate {
        raw,
        clipped: raw.max(0.0),
    })
}

/// Eve always guesses a uniform bit with probability 1/2.
pub fn clamp_guess(pg: f64) -> f64 {
    pg.clamp(0.5, 1.0)
}
