//! Statistics → relaxation → guessing bound → key rate, plus the η scan with
//! θ optimization for the qubit-ring family.

use std::f64::consts::FRAC_PI_2;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::attacks::{exclusion_attack, AttackReport};
use crate::error::{invalid, Error, Result};
use crate::moment::{
    build_problem, generate_monomials, guessing_bound, solve_scaled, GramSpec, SdpSolution,
    SolveStatus, SolveTolerances,
};
use crate::protocol::{
    gram_of_family, honest_stats_for_gram, key_rate, qubit_states, sifting_stats, ChannelParams,
    GramMatrix, StatTable,
};

/// Slack allowed between the certified upper bound and an explicit attack.
pub const SANDWICH_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineOptions {
    pub level: u8,
    pub tol: SolveTolerances,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            level: 2,
            tol: SolveTolerances::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateStatus {
    Optimal,
    Inaccurate,
    Infeasible,
    NoRawKey,
    Error,
}

impl RateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RateStatus::Optimal => "optimal",
            RateStatus::Inaccurate => "inaccurate",
            RateStatus::Infeasible => "infeasible",
            RateStatus::NoRawKey => "no_raw_key",
            RateStatus::Error => "error",
        }
    }

    /// True for outcomes that carry a certified number.
    pub fn is_certified(self) -> bool {
        matches!(self, RateStatus::Optimal | RateStatus::NoRawKey)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub status: String,
    pub moment_dim: usize,
    pub reduced_dim: usize,
    pub variables: usize,
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    pub min_eigenvalue: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
}

impl SolverDiagnostics {
    fn from_solution(sol: &SdpSolution) -> Self {
        Self {
            status: sol.status.as_str().to_string(),
            moment_dim: sol.moment_matrix.nrows(),
            reduced_dim: sol.reduced_dim,
            variables: sol.variables,
            iterations: sol.iterations,
            primal: sol.primal,
            dual: sol.dual,
            gap: sol.gap,
            min_eigenvalue: sol.min_eigenvalue,
            primal_infeasibility: sol.primal_infeasibility,
            dual_infeasibility: sol.dual_infeasibility,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub n: usize,
    pub level: u8,
    pub p_succ: f64,
    pub qber: Option<f64>,
    pub pg_upper: Option<f64>,
    pub keyrate_raw: f64,
    pub keyrate_clipped: f64,
    pub status: RateStatus,
    pub solver: Option<SolverDiagnostics>,
    pub attack: Option<AttackReport>,
}

/// Solves with the objective scaled by `1/p(succ)`; on a missed
/// certificate retries once unscaled with more iterations.
fn solve_bound(
    problem: &crate::moment::MomentProblem,
    p_succ: f64,
    tol: &SolveTolerances,
) -> Result<SdpSolution> {
    let first = solve_scaled(problem, (1.0 / p_succ).max(1.0), tol)?;
    if first.status != SolveStatus::Inaccurate {
        return Ok(first);
    }
    let retry_tol = SolveTolerances {
        max_iter: tol.max_iter * 2,
        ..*tol
    };
    let second = solve_scaled(problem, 1.0, &retry_tol)?;
    Ok(if second.status == SolveStatus::Optimal {
        second
    } else {
        first
    })
}

/// Key-rate bound for observed statistics and a Gram specification.
pub fn certify(spec: &GramSpec, stats: &StatTable, opts: &PipelineOptions) -> Result<KeyRateReport> {
    let n = spec.n();
    if stats.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "statistics are for n = {}, gram for n = {n}",
            stats.n()
        )));
    }
    let sift = sifting_stats(stats);
    let mut report = KeyRateReport {
        n,
        level: opts.level,
        p_succ: sift.p_succ,
        qber: sift.qber().ok(),
        pg_upper: None,
        keyrate_raw: 0.0,
        keyrate_clipped: 0.0,
        status: RateStatus::NoRawKey,
        solver: None,
        attack: None,
    };
    let Some(qber) = report.qber else {
        return Ok(report);
    };
    if sift.p_succ <= 0.0 {
        return Ok(report);
    }
    let mono = generate_monomials(n, opts.level, true)?;
    let problem = build_problem(&mono, spec, stats)?;
    let sol = solve_bound(&problem, sift.p_succ, &opts.tol)?;
    report.solver = Some(SolverDiagnostics::from_solution(&sol));
    report.status = match sol.status {
        SolveStatus::Optimal => RateStatus::Optimal,
        SolveStatus::Inaccurate => RateStatus::Inaccurate,
        SolveStatus::Infeasible => RateStatus::Infeasible,
    };
    if sol.status == SolveStatus::Infeasible {
        report.keyrate_raw = f64::NAN;
        report.keyrate_clipped = f64::NAN;
        return Ok(report);
    }
    let pg = guessing_bound(&sol, sift.p_succ)?;
    let rate = key_rate(pg, qber, sift.p_succ)?;
    report.pg_upper = Some(pg);
    report.keyrate_raw = rate.raw;
    report.keyrate_clipped = rate.clipped;
    Ok(report)
}

/// The Gram matrix an honest device is taken to realize: the exact matrix,
/// or the midpoint of an interval.
pub fn nominal_gram(spec: &GramSpec) -> Result<GramMatrix> {
    match spec {
        GramSpec::Exact(g) => Ok(g.clone()),
        GramSpec::Interval(iv) => {
            let n = iv.n();
            GramMatrix::new(DMatrix::from_fn(n, n, |i, j| {
                Complex64::new(
                    0.5 * (iv.re_lo[(i, j)] + iv.re_hi[(i, j)]),
                    0.5 * (iv.im_lo[(i, j)] + iv.im_hi[(i, j)]),
                )
            }))
            .map_err(|e| invalid(format!("interval midpoint is not a valid gram matrix: {e}")))
        }
    }
}

/// Certifies honest-device statistics on the nominal Gram matrix. Without
/// noise the exclusion attack reproduces these statistics, so it is attached
/// and the bound is checked against it; a bound below the attack is reported
/// as a numerical error. With noise the attack is not attached.
pub fn certify_honest(
    spec: &GramSpec,
    channel: ChannelParams,
    opts: &PipelineOptions,
) -> Result<KeyRateReport> {
    let gram = nominal_gram(spec)?;
    let stats = honest_stats_for_gram(&gram, channel);
    let mut report = certify(spec, &stats, opts)?;
    if channel.lambda != 0.0 {
        return Ok(report);
    }
    let attack = exclusion_attack(&gram, channel.eta)?;
    if let Some(pg) = report.pg_upper {
        if pg < attack.pg_lower - SANDWICH_TOL {
            return Err(Error::Numerical(format!(
                "certified pg {pg} is below the exclusion attack {}",
                attack.pg_lower
            )));
        }
    }
    report.attack = Some(attack);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaSearch {
    /// Points of the coarse grid `θ_k = k·(π/2)/coarse`.
    pub coarse: usize,
    pub iterations: usize,
}

impl Default for ThetaSearch {
    fn default() -> Self {
        Self {
            coarse: 25,
            iterations: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaChoice {
    Fixed(f64),
    Optimize(ThetaSearch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub eta: f64,
    pub theta: f64,
    pub p_succ: f64,
    pub qber: Option<f64>,
    pub pg_upper: Option<f64>,
    pub keyrate_raw: f64,
    pub keyrate_clipped: f64,
    pub status: RateStatus,
}

pub const CSV_HEADER: &str = "eta,theta,p_succ,qber,pg_upper,keyrate_raw,keyrate_clipped,status";

impl ScanRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.eta,
            self.theta,
            self.p_succ,
            opt(self.qber),
            opt(self.pg_upper),
            self.keyrate_raw,
            self.keyrate_clipped,
            self.status.as_str()
        )
    }

    /// Certified rows first, then the higher raw rate.
    fn better_than(&self, other: &ScanRow) -> bool {
        let rank = |r: &ScanRow| (r.status.is_certified(), r.keyrate_raw);
        let (a, b) = (rank(self), rank(other));
        match a.0.cmp(&b.0) {
            std::cmp::Ordering::Equal => a.1 > b.1 || (b.1.is_nan() && !a.1.is_nan()),
            o => o.is_gt(),
        }
    }
}

/// Noise and loss parameters shared by every point of a qubit-ring scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingScan {
    pub n: usize,
    pub lambda: f64,
    pub theta: ThetaChoice,
    pub opts: PipelineOptions,
}

impl RingScan {
    /// One evaluation; failures become rows with status `error`.
    pub fn evaluate(&self, eta: f64, theta: f64) -> ScanRow {
        let attempt = || -> Result<KeyRateReport> {
            let channel = ChannelParams::new(eta, self.lambda)?;
            let gram = gram_of_family(&qubit_states(self.n, theta)?);
            let stats = honest_stats_for_gram(&gram, channel);
            certify(&GramSpec::Exact(gram), &stats, &self.opts)
        };
        match attempt() {
            Ok(r) => ScanRow {
                eta,
                theta,
                p_succ: r.p_succ,
                qber: r.qber,
                pg_upper: r.pg_upper,
                keyrate_raw: r.keyrate_raw,
                keyrate_clipped: r.keyrate_clipped,
                status: r.status,
            },
            Err(_) => ScanRow {
                eta,
                theta,
                p_succ: f64::NAN,
                qber: None,
                pg_upper: None,
                keyrate_raw: f64::NAN,
                keyrate_clipped: f64::NAN,
                status: RateStatus::Error,
            },
        }
    }

    /// Coarse grid, then golden-section refinement around the best grid
    /// point. Returns the best row evaluated.
    pub fn point(&self, eta: f64) -> ScanRow {
        let search = match self.theta {
            ThetaChoice::Fixed(t) => return self.evaluate(eta, t),
            ThetaChoice::Optimize(s) => s,
        };
        let step = FRAC_PI_2 / search.coarse.max(1) as f64;
        let mut best: Option<(usize, ScanRow)> = None;
        for k in 1..=search.coarse.max(1) {
            let row = self.evaluate(eta, k as f64 * step);
            if best.as_ref().is_none_or(|(_, b)| row.better_than(b)) {
                best = Some((k, row));
            }
        }
        let (k, mut best) = best.expect("at least one grid point");
        let (mut a, mut b) = ((k - 1) as f64 * step, ((k + 1) as f64 * step).min(FRAC_PI_2));
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let mut fc = self.evaluate(eta, c);
        let mut fd = self.evaluate(eta, d);
        for _ in 0..search.iterations {
            for row in [&fc, &fd] {
                if row.better_than(&best) {
                    best = row.clone();
                }
            }
            if fc.better_than(&fd) {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.evaluate(eta, c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.evaluate(eta, d);
            }
        }
        for row in [fc, fd] {
            if row.better_than(&best) {
                best = row;
            }
        }
        best
    }

    /// Evaluates every η on up to `jobs` threads; rows come back in the
    /// order of `etas`.
    pub fn run(&self, etas: &[f64], jobs: usize) -> Result<Vec<ScanRow>> {
        if etas.is_empty() {
            return Err(invalid("empty eta grid"));
        }
        if let Some(e) = etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(invalid(format!("eta {e} outside [0, 1]")));
        }
        let next = AtomicUsize::new(0);
        let rows: Mutex<Vec<Option<ScanRow>>> = Mutex::new(vec![None; etas.len()]);
        std::thread::scope(|s| {
            for _ in 0..jobs.clamp(1, etas.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= etas.len() {
                        break;
                    }
                    let row = self.point(etas[i]);
                    rows.lock().expect("scan lock")[i] = Some(row);
                });
            }
        });
        Ok(rows
            .into_inner()
            .expect("scan lock")
            .into_iter()
            .map(|r| r.expect("every point evaluated"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::GramInterval;
    use std::f64::consts::PI;

    fn ring(n: usize, theta: f64) -> GramMatrix {
        gram_of_family(&qubit_states(n, theta).unwrap())
    }

    #[test]
    fn lossless_b92_has_positive_rate() {
        let spec = GramSpec::Exact(ring(2, PI / 4.0));
        let r = certify_honest(&spec, ChannelParams::new(1.0, 0.0).unwrap(), &PipelineOptions::default())
            .unwrap();
        assert_eq!(r.status, RateStatus::Optimal);
        assert!(r.pg_upper.unwrap() < 1.0);
        assert!(r.keyrate_raw > 0.0);
        assert!(r.pg_upper.unwrap() >= r.attack.unwrap().pg_lower);
    }

    #[test]
    fn orthogonal_states_give_no_key() {
        let spec = GramSpec::Exact(GramMatrix::identity(2).unwrap());
        for eta in [0.5, 0.9, 1.0] {
            let r = certify_honest(&spec, ChannelParams::lossy(eta).unwrap(), &PipelineOptions::default())
                .unwrap();
            assert!(r.keyrate_raw <= 1e-9, "eta {eta}: {}", r.keyrate_raw);
        }
    }

    #[test]
    fn zero_transmission_is_no_raw_key() {
        let spec = GramSpec::Exact(ring(2, PI / 4.0));
        let r = certify_honest(&spec, ChannelParams::lossy(0.0).unwrap(), &PipelineOptions::default())
            .unwrap();
        assert_eq!(r.status, RateStatus::NoRawKey);
        assert_eq!(r.keyrate_clipped, 0.0);
        assert_eq!(r.pg_upper, None);
    }

    #[test]
    fn zero_width_interval_equals_exact() {
        let g = ring(2, PI / 4.0);
        let ch = ChannelParams::new(0.9, 0.0).unwrap();
        let opts = PipelineOptions::default();
        let a = certify_honest(&GramSpec::Exact(g.clone()), ch, &opts).unwrap();
        let b = certify_honest(&GramSpec::Interval(GramInterval::exact(&g)), ch, &opts).unwrap();
        assert!((a.keyrate_raw - b.keyrate_raw).abs() < 1e-9);
    }

    #[test]
    fn mismatched_statistics_rejected() {
        let stats = honest_stats_for_gram(&ring(3, 1.0), ChannelParams::lossy(1.0).unwrap());
        let spec = GramSpec::Exact(ring(2, 1.0));
        assert!(certify(&spec, &stats, &PipelineOptions::default()).is_err());
    }

    #[test]
    fn csv_row_format() {
        let row = ScanRow {
            eta: 0.5,
            theta: 0.25,
            p_succ: 0.125,
            qber: None,
            pg_upper: None,
            keyrate_raw: 0.0,
            keyrate_clipped: 0.0,
            status: RateStatus::NoRawKey,
        };
        assert_eq!(row.csv_line(), "0.5,0.25,0.125,,,0,0,no_raw_key");
        assert_eq!(CSV_HEADER.split(',').count(), row.csv_line().split(',').count());
    }

    #[test]
    fn scan_keeps_eta_order_and_is_deterministic() {
        let scan = RingScan {
            n: 2,
            lambda: 0.0,
            theta: ThetaChoice::Optimize(ThetaSearch { coarse: 6, iterations: 8 }),
            opts: PipelineOptions::default(),
        };
        let etas = [1.0, 0.7, 0.9, 0.8];
        let a = scan.run(&etas, 3).unwrap();
        let b = scan.run(&etas, 1).unwrap();
        assert_eq!(a, b);
        let got: Vec<f64> = a.iter().map(|r| r.eta).collect();
        assert_eq!(got, etas);
        assert!(scan.run(&[], 2).is_err());
    }

    #[test]
    fn optimized_theta_beats_grid() {
        let scan = RingScan {
            n: 2,
            lambda: 0.0,
            theta: ThetaChoice::Optimize(ThetaSearch { coarse: 5, iterations: 10 }),
            opts: PipelineOptions::default(),
        };
        let best = scan.point(0.8);
        for k in 1..=5 {
            let row = scan.evaluate(0.8, k as f64 * FRAC_PI_2 / 5.0);
            assert!(best.keyrate_raw >= row.keyrate_raw - 1e-12);
        }
    }
}
