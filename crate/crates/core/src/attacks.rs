//! Closed-form intercept strategies. Their guessing probabilities are lower
//! bounds on what an eavesdropper achieves, so they bracket the relaxation
//! from below and supply hard no-key thresholds. They never enter a reported
//! key rate.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::protocol::{clamp_guess, lambda_min_nonzero, GramMatrix};

/// Slack when checking the exclusion measurement is a valid sub-POVM.
const POVM_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Exclusion,
    Usd,
    Blinding,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Exclusion => "exclusion",
            AttackKind::Usd => "usd",
            AttackKind::Blinding => "blinding",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub name: AttackKind,
    /// Fraction of rounds intercepted.
    pub q: f64,
    pub pg_lower: f64,
    /// Transmission at or below which the attack yields `pg = 1`.
    pub threshold_eta: f64,
}

/// Largest `μ` for which `{μ(1 − |ψ_i⟩⟨ψ_i|)}` is a sub-POVM on the span of
/// the states: `μ* = 1/(n − λ_min)`.
pub fn mu_star(gram: &GramMatrix) -> Result<f64> {
    let n = gram.n() as f64;
    let lmin = lambda_min_nonzero(gram);
    let mu = 1.0 / (n - lmin);
    // Nonzero eigenvalues of Σ|ψ_i⟩⟨ψ_i| must be at least (nμ − 1)/μ.
    let need = (n * mu - 1.0) / mu;
    let eig = gram.eigenvalues();
    let top = eig.last().copied().unwrap_or(0.0);
    let support = eig.iter().filter(|&&l| l > crate::protocol::RANK_TOL * top);
    if let Some(bad) = support.clone().find(|&&l| l < need - POVM_TOL) {
        return Err(crate::error::Error::Numerical(format!(
            "exclusion measurement invalid: eigenvalue {bad} below {need}"
        )));
    }
    Ok(mu)
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) || eta.is_nan() {
        return Err(invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

/// Eve applies the exclusion measurement on a fraction `q` of rounds and
/// steers Bob's detector to click only on the excluded setting.
pub fn exclusion_attack(gram: &GramMatrix, eta: f64) -> Result<AttackReport> {
    check_eta(eta)?;
    let n = gram.n() as f64;
    let lmin = lambda_min_nonzero(gram);
    let mu = mu_star(gram)?;
    let threshold = 1.0 / (n - lmin);
    let denom = n - 1.0 - lmin;
    // Orthogonal states (μ* = 1) are excluded perfectly.
    if denom <= 1e-12 {
        let pg = if eta < 1.0 { 1.0 } else { 0.5 };
        let q = if eta < 1.0 { 1.0 } else { 0.0 };
        return Ok(AttackReport {
            name: AttackKind::Exclusion,
            q,
            pg_lower: pg,
            threshold_eta: threshold,
        });
    }
    let q = ((1.0 - eta) / (1.0 - mu)).clamp(0.0, 1.0);
    let pg = if eta <= threshold {
        1.0
    } else {
        clamp_guess(0.5 * (1.0 + (1.0 - eta) / (eta * denom)))
    };
    Ok(AttackReport {
        name: AttackKind::Exclusion,
        q,
        pg_lower: pg,
        threshold_eta: threshold,
    })
}

/// Unambiguous discrimination of states with constant real overlap `d`.
pub fn usd_attack(d: f64, eta: f64) -> Result<AttackReport> {
    check_eta(eta)?;
    if !(d > 0.0 && d < 1.0) {
        return Err(invalid(format!("overlap must lie in (0, 1), got {d}")));
    }
    let threshold = 1.0 / (1.0 + d);
    let q = ((1.0 + d) * (1.0 - eta) / d).clamp(0.0, 1.0);
    let pg = if eta <= threshold {
        1.0
    } else {
        clamp_guess((1.0 - eta * (1.0 - d)) / (2.0 * d * eta))
    };
    Ok(AttackReport {
        name: AttackKind::Usd,
        q,
        pg_lower: pg,
        threshold_eta: threshold,
    })
}

/// With `η ≤ 1/n` Eve can pick Bob's setting herself on every detected round.
pub fn blinding_limit(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(invalid(format!("need n >= 2, got {n}")));
    }
    Ok(1.0 / n as f64)
}

pub fn blinding_attack(n: usize, eta: f64) -> Result<AttackReport> {
    check_eta(eta)?;
    let threshold = blinding_limit(n)?;
    Ok(AttackReport {
        name: AttackKind::Blinding,
        q: if eta <= threshold { 1.0 } else { 0.0 },
        pg_lower: if eta <= threshold { 1.0 } else { 0.5 },
        threshold_eta: threshold,
    })
}
