//! Round-by-round simulation of the sifted-key protocol, for honest devices
//! and for the intercept strategies of [`crate::attacks`].
//!
//! Outcomes are drawn from the exact single-round laws, not from a simulated
//! quantum state. For `λ > 0` the attack strategies spend a fraction `λ` of
//! rounds on white noise (Bob clicks with probability `η/2`, Eve learns
//! nothing) so their marginal matches the noisy honest table; at `λ = 0`
//! they are the plain loss-only strategies.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::mu_star;
use crate::error::{invalid, Error, Result};
use crate::protocol::{
    honest_stats_for_gram, key_pairs, ChannelParams, GramMatrix, StatTable, StateFamily,
};

/// Recorded in every summary so runs can be replayed.
pub const RNG_IDENTITY: &str = "ChaCha8Rng(rand_chacha 0.9) seed_from_u64, stream = shard index";

const OVERLAP_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Honest,
    Exclusion,
    Usd,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Honest => "honest",
            Strategy::Exclusion => "exclusion",
            Strategy::Usd => "usd",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "honest" => Ok(Strategy::Honest),
            "exclusion" => Ok(Strategy::Exclusion),
            "usd" => Ok(Strategy::Usd),
            other => Err(invalid(format!(
                "unknown strategy {other:?}, expected honest, exclusion or usd"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundRecord {
    pub r: (usize, usize),
    pub k: u8,
    pub x: usize,
    pub y: usize,
    pub b: u8,
    pub kept: bool,
    pub bob_guess: Option<u8>,
    pub eve_guess: Option<u8>,
}

impl RoundRecord {
    /// `r0 r1 k x y b kept bob_guess eve_guess`, `-` where undefined.
    pub fn transcript_line(&self) -> String {
        let opt = |v: Option<u8>| v.map_or_else(|| "-".to_string(), |b| b.to_string());
        format!(
            "{} {} {} {} {} {} {} {} {}",
            self.r.0,
            self.r.1,
            self.k,
            self.x,
            self.y,
            self.b,
            u8::from(self.kept),
            opt(self.bob_guess),
            opt(self.eve_guess)
        )
    }
}

/// Counts only, so that shards merge exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub n: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub rng: String,
    pub rounds: u64,
    /// Row-major `n × n`: rounds with `(x, y)`.
    pub sent: Vec<u64>,
    /// Row-major `n × n`: rounds with `(x, y)` and `b = 0`.
    pub clicks: Vec<u64>,
    pub kept: u64,
    pub errors: u64,
    /// Kept rounds on which Eve committed to a guess.
    pub eve_guesses: u64,
    pub eve_correct: u64,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl SimulationSummary {
    fn empty(n: usize, strategy: Strategy, seed: u64) -> Self {
        Self {
            n,
            strategy,
            seed,
            rng: RNG_IDENTITY.to_string(),
            rounds: 0,
            sent: vec![0; n * n],
            clicks: vec![0; n * n],
            kept: 0,
            errors: 0,
            eve_guesses: 0,
            eve_correct: 0,
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> (u64, u64) {
        (self.sent[x * self.n + y], self.clicks[x * self.n + y])
    }

    pub fn p0(&self, x: usize, y: usize) -> Option<f64> {
        let (s, c) = self.cell(x, y);
        ratio(c, s)
    }

    pub fn p_succ(&self) -> f64 {
        ratio(self.kept, self.rounds).unwrap_or(0.0)
    }

    /// `None` when no round was kept.
    pub fn qber(&self) -> Option<f64> {
        ratio(self.errors, self.kept)
    }

    /// Fraction of kept rounds where Eve's bit equals `k`.
    pub fn eve_agreement(&self) -> Option<f64> {
        ratio(self.eve_correct, self.eve_guesses)
    }

    /// Counts add; the result does not depend on merge order.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.n != other.n || self.strategy != other.strategy || self.seed != other.seed {
            return Err(invalid("summaries from different runs cannot be merged"));
        }
        let add = |a: &[u64], b: &[u64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(Self {
            n: self.n,
            strategy: self.strategy,
            seed: self.seed,
            rng: self.rng.clone(),
            rounds: self.rounds + other.rounds,
            sent: add(&self.sent, &other.sent),
            clicks: add(&self.clicks, &other.clicks),
            kept: self.kept + other.kept,
            errors: self.errors + other.errors,
            eve_guesses: self.eve_guesses + other.eve_guesses,
            eve_correct: self.eve_correct + other.eve_correct,
        })
    }

    fn record(&mut self, rec: &RoundRecord) {
        let cell = rec.x * self.n + rec.y;
        self.rounds += 1;
        self.sent[cell] += 1;
        if rec.b == 0 {
            self.clicks[cell] += 1;
        }
        if rec.kept {
            self.kept += 1;
            if rec.bob_guess != Some(rec.k) {
                self.errors += 1;
            }
            if let Some(e) = rec.eve_guess {
                self.eve_guesses += 1;
                if e == rec.k {
                    self.eve_correct += 1;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Law {
    Honest {
        p0: StatTable,
    },
    Exclusion {
        q: f64,
        /// Row `x`: probability of Eve's exclusion outcome `i`.
        outcome: DMatrix<f64>,
    },
    Usd {
        q: f64,
        d: f64,
    },
}

/// Per-round outcome law for one `(gram, channel, strategy)`.
#[derive(Clone, Debug)]
pub struct Simulator {
    gram: GramMatrix,
    channel: ChannelParams,
    strategy: Strategy,
    law: Law,
}

/// Off-diagonal value when every overlap equals the same real `d`.
pub fn constant_overlap_value(gram: &GramMatrix) -> Option<f64> {
    let d = gram.entry(0, 1);
    let n = gram.n();
    let same = (0..n).all(|i| {
        (0..n).all(|j| i == j || (gram.entry(i, j) - d).norm() <= OVERLAP_TOL)
    });
    (same && d.im.abs() <= OVERLAP_TOL).then_some(d.re)
}

fn incompatible(what: &str, q: f64, threshold: f64, eta: f64) -> Error {
    invalid(format!(
        "{what} strategy needs intercept fraction {q:.6} > 1 at eta = {eta}; \
         it only reproduces the statistics for eta >= {threshold:.6}"
    ))
}

impl Simulator {
    pub fn new(gram: GramMatrix, channel: ChannelParams, strategy: Strategy) -> Result<Self> {
        let n = gram.n();
        let eta = channel.eta;
        let law = match strategy {
            Strategy::Honest => Law::Honest {
                p0: honest_stats_for_gram(&gram, channel),
            },
            Strategy::Exclusion => {
                let mu = mu_star(&gram)?;
                let threshold = mu;
                let q = if 1.0 - mu <= 1e-12 {
                    if eta < 1.0 {
                        return Err(incompatible("exclusion", f64::INFINITY, 1.0, eta));
                    }
                    0.0
                } else {
                    (1.0 - eta) / (1.0 - mu)
                };
                if q > 1.0 + 1e-12 {
                    return Err(incompatible("exclusion", q, threshold, eta));
                }
                let outcome = DMatrix::from_fn(n, n, |x, i| mu * (1.0 - gram.entry(x, i).norm_sqr()));
                Law::Exclusion {
                    q: q.min(1.0),
                    outcome,
                }
            }
            Strategy::Usd => {
                let d = constant_overlap_value(&gram)
                    .filter(|d| *d > 0.0 && *d < 1.0)
                    .ok_or_else(|| invalid("usd strategy needs a constant real overlap d in (0, 1)"))?;
                let q = (1.0 + d) * (1.0 - eta) / d;
                if q > 1.0 + 1e-12 {
                    return Err(incompatible("usd", q, 1.0 / (1.0 + d), eta));
                }
                Law::Usd { q: q.min(1.0), d }
            }
        };
        Ok(Self {
            gram,
            channel,
            strategy,
            law,
        })
    }

    /// Honest simulator whose click table is computed from explicit qubit
    /// density matrices instead of the closed form.
    pub fn honest_from_states(family: &StateFamily, channel: ChannelParams) -> Result<Self> {
        let p0 = honest_table_from_states(family, channel)?;
        Ok(Self {
            gram: crate::protocol::gram_of_family(family),
            channel,
            strategy: Strategy::Honest,
            law: Law::Honest { p0 },
        })
    }

    pub fn n(&self) -> usize {
        self.gram.n()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Intercept fraction; zero for honest devices.
    pub fn intercept_fraction(&self) -> f64 {
        match &self.law {
            Law::Honest { .. } => 0.0,
            Law::Exclusion { q, .. } | Law::Usd { q, .. } => *q,
        }
    }

    /// Exact marginal `P(b = 0 | x, y)` of the strategy.
    pub fn marginal_p0(&self, x: usize, y: usize) -> f64 {
        let a = 1.0 - self.gram.entry(x, y).norm_sqr();
        let lam = self.channel.lambda;
        let attack = match &self.law {
            Law::Honest { p0 } => return p0.p0(x, y),
            Law::Exclusion { q, outcome } => q * outcome[(x, y)] + (1.0 - q) * a,
            Law::Usd { q, d } => {
                let hit = if x == y { 0.0 } else { 1.0 - d };
                q * hit + (1.0 - q) * a
            }
        };
        lam * self.channel.eta / 2.0 + (1.0 - lam) * attack
    }

    /// Expected fraction of kept rounds on which Eve guesses `k` correctly.
    /// `None` for honest devices.
    pub fn expected_agreement(&self) -> Option<f64> {
        let n = self.n();
        let lam = self.channel.lambda;
        let (mut kept, mut known) = (0.0, 0.0);
        for (r0, r1) in key_pairs(n) {
            for x in [r0, r1] {
                for y in [r0, r1] {
                    let total = self.marginal_p0(x, y);
                    let informed = (1.0 - lam)
                        * match &self.law {
                            Law::Honest { .. } => return None,
                            Law::Exclusion { q, outcome } => q * outcome[(x, y)],
                            Law::Usd { q, d } => q * if x == y { 0.0 } else { 1.0 - d },
                        };
                    kept += total;
                    known += informed + 0.5 * (total - informed);
                }
            }
        }
        (kept > 0.0).then(|| known / kept)
    }

    fn draw<R: Rng>(&self, rng: &mut R, pairs: &[(usize, usize)]) -> RoundRecord {
        let n = self.n();
        let r = pairs[rng.random_range(0..pairs.len())];
        let k: u8 = rng.random_range(0..2);
        let x = if k == 0 { r.0 } else { r.1 };
        let y = rng.random_range(0..n);
        let eta = self.channel.eta;

        let mut eve_knows = false;
        let click = match &self.law {
            Law::Honest { p0 } => rng.random::<f64>() < p0.p0(x, y),
            _ if rng.random::<f64>() < self.channel.lambda => rng.random::<f64>() < eta / 2.0,
            Law::Exclusion { q, outcome } => {
                if rng.random::<f64>() < *q {
                    let mut u = rng.random::<f64>();
                    let mut seen = None;
                    for i in 0..n {
                        u -= outcome[(x, i)];
                        if u < 0.0 {
                            seen = Some(i);
                            break;
                        }
                    }
                    eve_knows = true;
                    seen == Some(y)
                } else {
                    rng.random::<f64>() < 1.0 - self.gram.entry(x, y).norm_sqr()
                }
            }
            Law::Usd { q, d } => {
                if rng.random::<f64>() < *q {
                    let success = rng.random::<f64>() < 1.0 - d;
                    eve_knows = success;
                    success && y != x
                } else {
                    rng.random::<f64>() < 1.0 - self.gram.entry(x, y).norm_sqr()
                }
            }
        };
        let b = u8::from(!click);
        let kept = click && (y == r.0 || y == r.1);
        let bob_guess = kept.then(|| if y == r.0 { 1 } else { 0 });
        let eve_guess = match self.strategy {
            Strategy::Honest => None,
            _ if !kept => None,
            _ if eve_knows => Some(k),
            _ => Some(rng.random_range(0..2)),
        };
        RoundRecord {
            r,
            k,
            x,
            y,
            b,
            kept,
            bob_guess,
            eve_guess,
        }
    }

    /// Runs `rounds` rounds on RNG stream `stream`, optionally writing the
    /// transcript.
    pub fn run_stream(
        &self,
        rounds: u64,
        seed: u64,
        stream: u64,
        mut transcript: Option<&mut dyn Write>,
    ) -> Result<SimulationSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let pairs = key_pairs(self.n());
        let mut summary = SimulationSummary::empty(self.n(), self.strategy, seed);
        for _ in 0..rounds {
            let rec = self.draw(&mut rng, &pairs);
            if let Some(w) = transcript.as_deref_mut() {
                writeln!(w, "{}", rec.transcript_line())
                    .map_err(|e| Error::Numerical(format!("transcript write failed: {e}")))?;
            }
            summary.record(&rec);
        }
        Ok(summary)
    }

    /// Splits the rounds over `shards` independent streams, runs them on
    /// separate threads and merges. The result depends on `shards` but not on
    /// scheduling.
    pub fn run_sharded(&self, rounds: u64, seed: u64, shards: usize) -> Result<SimulationSummary> {
        let shards = shards.max(1) as u64;
        let parts: Vec<Result<SimulationSummary>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..shards)
                .map(|i| {
                    let count = rounds / shards + u64::from(i < rounds % shards);
                    s.spawn(move || self.run_stream(count, seed, i, None))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation thread panicked"))
                .collect()
        });
        let mut acc = SimulationSummary::empty(self.n(), self.strategy, seed);
        for p in parts {
            acc = acc.merge(&p?)?;
        }
        Ok(acc)
    }
}

/// Single-stream run.
pub fn run_rounds(
    gram: &GramMatrix,
    channel: ChannelParams,
    strategy: Strategy,
    rounds: u64,
    seed: u64,
) -> Result<SimulationSummary> {
    if rounds == 0 {
        return Err(invalid("need at least one round"));
    }
    Simulator::new(gram.clone(), channel, strategy)?.run_stream(rounds, seed, 0, None)
}

/// `P(b = 0 | x, y) = η Tr[ρ_x (1 − |ψ_y⟩⟨ψ_y|)]` with
/// `ρ_x = (1 − λ)|ψ_x⟩⟨ψ_x| + λ 1/2`, from explicit qubit states.
pub fn honest_table_from_states(family: &StateFamily, channel: ChannelParams) -> Result<StatTable> {
    if family.dimension() != 2 {
        return Err(invalid(format!(
            "state-vector path needs qubit states, got dimension {}",
            family.dimension()
        )));
    }
    let n = family.n();
    let states = family.states();
    let id = DMatrix::<Complex64>::identity(2, 2);
    let lam = Complex64::new(channel.lambda, 0.0);
    let table = DMatrix::from_fn(n, n, |x, y| {
        let psi = &states[x];
        let rho = psi * psi.adjoint() * (Complex64::new(1.0, 0.0) - lam) + &id * (lam / 2.0);
        let phi = &states[y];
        let bob = &id - phi * phi.adjoint();
        (channel.eta * (rho * bob).trace().re).clamp(0.0, 1.0)
    });
    StatTable::new(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{exclusion_attack, usd_attack};
    use crate::protocol::{gram_of_family, honest_stats, qubit_states, sifting_stats};
    use std::f64::consts::PI;

    fn ring(n: usize, theta: f64) -> GramMatrix {
        gram_of_family(&qubit_states(n, theta).unwrap())
    }

    fn ch(eta: f64, lambda: f64) -> ChannelParams {
        ChannelParams::new(eta, lambda).unwrap()
    }

    #[test]
    fn noiseless_honest_has_no_errors() {
        let s = run_rounds(&ring(2, PI / 4.0), ch(1.0, 0.0), Strategy::Honest, 200_000, 7).unwrap();
        assert_eq!(s.errors, 0);
        assert_eq!(s.qber(), Some(0.0));
        let p = sifting_stats(&honest_stats(2, PI / 4.0, ch(1.0, 0.0)).unwrap()).p_succ;
        assert!((p - 0.25).abs() < 1e-12);
        let sigma = (p * (1.0 - p) / s.rounds as f64).sqrt();
        assert!((s.p_succ() - p).abs() < 4.0 * sigma);
        assert_eq!(s.eve_agreement(), None);
    }

    #[test]
    fn same_seed_same_transcript() {
        let sim = Simulator::new(ring(3, 1.0), ch(0.8, 0.0), Strategy::Exclusion).unwrap();
        let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
        sim.run_stream(500, 42, 0, Some(&mut a)).unwrap();
        sim.run_stream(500, 42, 0, Some(&mut b)).unwrap();
        sim.run_stream(500, 43, 0, Some(&mut c)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 500);
    }

    #[test]
    fn transcript_fields() {
        let rec = RoundRecord {
            r: (0, 2),
            k: 1,
            x: 2,
            y: 0,
            b: 0,
            kept: true,
            bob_guess: Some(1),
            eve_guess: None,
        };
        assert_eq!(rec.transcript_line(), "0 2 1 2 0 0 1 1 -");
    }

    #[test]
    fn records_satisfy_sifting_rules() {
        let sim = Simulator::new(ring(4, 1.1), ch(0.7, 0.1), Strategy::Honest).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = key_pairs(4);
        for _ in 0..20_000 {
            let r = sim.draw(&mut rng, &pairs);
            assert_eq!(r.x, if r.k == 0 { r.r.0 } else { r.r.1 });
            assert_eq!(r.kept, r.b == 0 && (r.y == r.r.0 || r.y == r.r.1));
            assert_eq!(r.bob_guess.is_some(), r.kept);
            if r.kept {
                assert_eq!(r.bob_guess, Some(if r.y == r.r.0 { 1 } else { 0 }));
            }
        }
    }

    #[test]
    fn exclusion_at_threshold_eve_always_right() {
        let g = ring(3, PI / 2.0);
        let eta = exclusion_attack(&g, 0.5).unwrap().threshold_eta;
        let s = run_rounds(&g, ch(eta, 0.0), Strategy::Exclusion, 100_000, 11).unwrap();
        assert!(s.kept > 0);
        assert_eq!(s.eve_correct, s.eve_guesses);
        assert_eq!(s.eve_guesses, s.kept);
    }

    #[test]
    fn attack_marginals_match_honest_table() {
        for (g, strategy, eta, lam) in [
            (ring(3, 1.0), Strategy::Exclusion, 0.85, 0.0),
            (ring(2, PI / 4.0), Strategy::Exclusion, 0.9, 0.05),
            (GramMatrix::constant_overlap(3, 0.5).unwrap(), Strategy::Usd, 0.8, 0.0),
            (GramMatrix::constant_overlap(2, 0.5).unwrap(), Strategy::Usd, 0.9, 0.1),
        ] {
            let sim = Simulator::new(g.clone(), ch(eta, lam), strategy).unwrap();
            let honest = honest_stats_for_gram(&g, ch(eta, lam));
            for x in 0..g.n() {
                for y in 0..g.n() {
                    assert!((sim.marginal_p0(x, y) - honest.p0(x, y)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn expected_agreement_matches_attack_bound() {
        let g = ring(2, PI / 4.0);
        let sim = Simulator::new(g.clone(), ch(0.9, 0.0), Strategy::Exclusion).unwrap();
        let pg = exclusion_attack(&g, 0.9).unwrap().pg_lower;
        assert!((sim.expected_agreement().unwrap() - pg).abs() < 1e-12);
        let g = GramMatrix::constant_overlap(2, 0.5).unwrap();
        let sim = Simulator::new(g, ch(0.8, 0.0), Strategy::Usd).unwrap();
        let pg = usd_attack(0.5, 0.8).unwrap().pg_lower;
        assert!((sim.expected_agreement().unwrap() - pg).abs() < 1e-12);
    }

    #[test]
    fn rejects_too_much_loss_for_attack() {
        let g = ring(2, PI / 4.0);
        let err = Simulator::new(g, ch(0.3, 0.0), Strategy::Exclusion).unwrap_err();
        assert!(err.to_string().contains("eta >="));
        let g = GramMatrix::constant_overlap(2, 0.5).unwrap();
        assert!(Simulator::new(g.clone(), ch(0.6, 0.0), Strategy::Usd).is_err());
        assert!(Simulator::new(ring(3, 1.0), ch(0.9, 0.0), Strategy::Usd).is_err());
        assert!(run_rounds(&g, ch(0.9, 0.0), Strategy::Honest, 0, 1).is_err());
    }

    #[test]
    fn tiny_eta_can_keep_nothing() {
        let s = run_rounds(&ring(2, 0.3), ch(1e-9, 0.0), Strategy::Honest, 10, 5).unwrap();
        assert_eq!(s.kept, 0);
        assert_eq!(s.qber(), None);
        assert_eq!(s.p_succ(), 0.0);
    }

    #[test]
    fn merge_is_associative_and_checked() {
        let sim = Simulator::new(ring(3, 0.9), ch(0.9, 0.02), Strategy::Honest).unwrap();
        let parts: Vec<_> = (0..3).map(|i| sim.run_stream(1000, 9, i, None).unwrap()).collect();
        let left = parts[0].merge(&parts[1]).unwrap().merge(&parts[2]).unwrap();
        let right = parts[0].merge(&parts[1].merge(&parts[2]).unwrap()).unwrap();
        let swapped = parts[2].merge(&parts[0]).unwrap().merge(&parts[1]).unwrap();
        assert_eq!(left, right);
        assert_eq!(left, swapped);
        assert_eq!(left.rounds, 3000);
        let other = sim.run_stream(10, 10, 0, None).unwrap();
        assert!(parts[0].merge(&other).is_err());
        let sharded = sim.run_sharded(3000, 9, 3).unwrap();
        assert_eq!(sharded, left);
    }

    #[test]
    fn state_vector_path_matches_closed_form() {
        for (n, theta, eta, lam) in [(2, PI / 4.0, 0.9, 0.05), (3, 1.3, 0.7, 0.2), (5, 0.4, 1.0, 0.0)] {
            let fam = qubit_states(n, theta).unwrap();
            let a = honest_table_from_states(&fam, ch(eta, lam)).unwrap();
            let b = honest_stats(n, theta, ch(eta, lam)).unwrap();
            assert!((a.table() - b.table()).abs().max() < 1e-12);
        }
    }
}
