//! Moment matrices of concrete finite-dimensional models.
//!
//! The states live in `H_B ⊗ H_E`; Bob's projector `B_y` acts as `B_y ⊗ 1`
//! and Eve's `E_r` as `1 ⊗ E_r`. Used as a feasibility oracle for the
//! relaxation.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::linalg::is_projector;
use crate::protocol::{pair_count, StateFamily};

use super::monomial::{Generator, MonomialSet};

const PROJECTOR_TOL: f64 = 1e-10;

/// Outcome-0 projectors of Bob (`n`, on `H_B`) and Eve (`C(n,2)`, on `H_E`).
#[derive(Clone, Debug)]
pub struct ExplicitMeasurements {
    pub bob: Vec<DMatrix<Complex64>>,
    pub eve: Vec<DMatrix<Complex64>>,
}

impl ExplicitMeasurements {
    pub fn new(bob: Vec<DMatrix<Complex64>>, eve: Vec<DMatrix<Complex64>>) -> Result<Self> {
        let n = bob.len();
        if n < 2 {
            return Err(invalid("need at least two Bob settings"));
        }
        if eve.len() != pair_count(n) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} Eve measurements for n = {n}, got {}",
                pair_count(n),
                eve.len()
            )));
        }
        for (name, ops) in [("Bob", &bob), ("Eve", &eve)] {
            let d = ops[0].nrows();
            for (i, p) in ops.iter().enumerate() {
                if p.nrows() != d || p.ncols() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "{name} projector {i} is {}x{}, expected {d}x{d}",
                        p.nrows(),
                        p.ncols()
                    )));
                }
                if !is_projector(p, PROJECTOR_TOL) {
                    return Err(invalid(format!("{name} operator {i} is not a projector")));
                }
            }
        }
        Ok(Self { bob, eve })
    }

    pub fn bob_dim(&self) -> usize {
        self.bob[0].nrows()
    }

    pub fn eve_dim(&self) -> usize {
        self.eve[0].nrows()
    }
}

fn kron(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    a.kronecker(b)
}

/// `Γ[(x,i),(x',j)] = ⟨ψ_x| S_i† S_j |ψ_x'⟩` for the given model.
pub fn explicit_moment_matrix(
    family: &StateFamily,
    meas: &ExplicitMeasurements,
    mono: &MonomialSet,
) -> Result<DMatrix<Complex64>> {
    let n = family.n();
    if mono.n() != n || meas.bob.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "family has {n} states, monomials are for n = {}, Bob has {} settings",
            mono.n(),
            meas.bob.len()
        )));
    }
    let (db, de) = (meas.bob_dim(), meas.eve_dim());
    if family.dimension() != db * de {
        return Err(Error::DimensionMismatch(format!(
            "states have dimension {}, Bob ⊗ Eve has {}",
            family.dimension(),
            db * de
        )));
    }
    let id_b = DMatrix::<Complex64>::identity(db, db);
    let id_e = DMatrix::<Complex64>::identity(de, de);
    let bob: Vec<_> = meas.bob.iter().map(|b| kron(b, &id_e)).collect();
    let eve: Vec<_> = meas.eve.iter().map(|e| kron(&id_b, e)).collect();

    let s = mono.len();
    let states = family.states();
    let mut vecs: Vec<DVector<Complex64>> = Vec::with_capacity(n * s);
    for psi in &states {
        for m in mono.monomials() {
            // Rightmost generator acts first.
            let mut v = psi.clone();
            for g in m.word().iter().rev() {
                v = match *g {
                    Generator::Identity => v,
                    Generator::Bob(y) => &bob[y] * v,
                    Generator::Eve(r) => &eve[r] * v,
                };
            }
            vecs.push(v);
        }
    }
    let d = n * s;
    Ok(DMatrix::from_fn(d, d, |p, q| vecs[p].dotc(&vecs[q])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::monomial::{generate_monomials, Monomial};
    use crate::protocol::{gram_of_family, honest_stats, ChannelParams};
    use std::f64::consts::PI;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    /// Bob projects onto the complement of `|ψ_y⟩`; Eve does nothing.
    fn honest_model(n: usize, theta: f64) -> (StateFamily, ExplicitMeasurements) {
        let fam = StateFamily::qubit_ring(n, theta).unwrap();
        let bob = fam
            .states()
            .iter()
            .map(|v| DMatrix::identity(2, 2) - v * v.adjoint())
            .collect();
        let eve = vec![DMatrix::from_element(1, 1, c(1.0)); pair_count(n)];
        (fam, ExplicitMeasurements::new(bob, eve).unwrap())
    }

    #[test]
    fn honest_clicks_match_statistics() {
        let (fam, meas) = honest_model(3, 1.1);
        let mono = generate_monomials(3, 1, true).unwrap();
        let gamma = explicit_moment_matrix(&fam, &meas, &mono).unwrap();
        let stats = honest_stats(3, 1.1, ChannelParams::new(1.0, 0.0).unwrap()).unwrap();
        let s = mono.len();
        for x in 0..3 {
            for y in 0..3 {
                let j = mono.position(&Monomial::bob(y)).unwrap();
                assert!((gamma[(x * s, x * s + j)].re - stats.p0(x, y)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_only_basis_is_the_gram_matrix() {
        let (fam, meas) = honest_model(3, 0.7);
        let mono = MonomialSet::from_monomials(3, [Monomial::identity()]).unwrap();
        let gamma = explicit_moment_matrix(&fam, &meas, &mono).unwrap();
        let g = gram_of_family(&fam);
        assert!((gamma - g.matrix()).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_projectors() {
        let half = DMatrix::from_element(1, 1, c(0.5));
        let one = DMatrix::from_element(1, 1, c(1.0));
        assert!(ExplicitMeasurements::new(vec![one.clone(), half], vec![one]).is_err());
    }

    #[test]
    fn dimension_checked() {
        let (fam, _) = honest_model(2, PI / 4.0);
        let two = DMatrix::identity(2, 2);
        let meas = ExplicitMeasurements::new(vec![two.clone(), two.clone()], vec![two]).unwrap();
        let mono = generate_monomials(2, 1, true).unwrap();
        assert!(explicit_moment_matrix(&fam, &meas, &mono).is_err());
    }
}
