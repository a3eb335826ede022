//! Words over Bob's and Eve's outcome-0 projectors.
//!
//! Each binary measurement is represented by its outcome-0 projector; the
//! outcome-1 projector is `1 − P` and never appears as a generator. The
//! relations used for rewriting are idempotence `P² = P` and the commutation
//! of every Bob projector with every Eve projector. No orthogonality holds
//! between outcome-0 projectors of different settings, so no word ever
//! reduces to zero.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::protocol::pair_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Generator {
    Identity,
    /// `B_{0|y}`.
    Bob(usize),
    /// `E_{0|r}` for key pair index `r`.
    Eve(usize),
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Identity => write!(f, "1"),
            Generator::Bob(y) => write!(f, "B{y}"),
            Generator::Eve(r) => write!(f, "E{r}"),
        }
    }
}

/// A canonical word: Bob factors first, then Eve factors, no identities and
/// no equal neighbours. The empty word is the identity operator.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial {
    word: Vec<Generator>,
}

/// Graded lexicographic: degree first, then generator by generator.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.word
            .len()
            .cmp(&other.word.len())
            .then_with(|| self.word.cmp(&other.word))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.word.is_empty() {
            return write!(f, "1");
        }
        for (i, g) in self.word.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Monomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut word = Vec::new();
        for tok in s.split('.') {
            let g = match tok.as_bytes().first() {
                Some(b'1') if tok == "1" => Generator::Identity,
                Some(b'B') => Generator::Bob(parse_index(&tok[1..])?),
                Some(b'E') => Generator::Eve(parse_index(&tok[1..])?),
                _ => return Err(Error::Parse(format!("bad generator '{tok}'"))),
            };
            word.push(g);
        }
        Ok(canonicalize(&word))
    }
}

fn parse_index(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad generator index '{s}'")))
}

impl Monomial {
    pub fn identity() -> Self {
        Self { word: Vec::new() }
    }

    pub fn bob(y: usize) -> Self {
        Self {
            word: vec![Generator::Bob(y)],
        }
    }

    pub fn eve(r: usize) -> Self {
        Self {
            word: vec![Generator::Eve(r)],
        }
    }

    pub fn word(&self) -> &[Generator] {
        &self.word
    }

    pub fn degree(&self) -> usize {
        self.word.len()
    }

    pub fn is_identity(&self) -> bool {
        self.word.is_empty()
    }

    pub fn bob_part(&self) -> &[Generator] {
        let split = self.split();
        &self.word[..split]
    }

    pub fn eve_part(&self) -> &[Generator] {
        let split = self.split();
        &self.word[split..]
    }

    fn split(&self) -> usize {
        self.word
            .iter()
            .position(|g| matches!(g, Generator::Eve(_)))
            .unwrap_or(self.word.len())
    }

    /// Adjoint word: every generator is Hermitian, so the word is reversed.
    pub fn adjoint(&self) -> Self {
        let mut word = self.word.clone();
        word.reverse();
        canonicalize(&word)
    }

    pub fn is_self_adjoint(&self) -> bool {
        self.adjoint() == *self
    }

    /// Canonical form of `self · other`.
    pub fn mul(&self, other: &Self) -> Self {
        let mut word = Vec::with_capacity(self.word.len() + other.word.len());
        word.extend_from_slice(&self.word);
        word.extend_from_slice(&other.word);
        canonicalize(&word)
    }

    /// Canonical form of `self† · other`.
    pub fn adjoint_mul(&self, other: &Self) -> Self {
        let mut word = Vec::with_capacity(self.word.len() + other.word.len());
        word.extend(self.word.iter().rev());
        word.extend_from_slice(&other.word);
        canonicalize(&word)
    }
}

/// Rewrites a word to canonical form: drops identities, moves Eve factors
/// past Bob factors (keeping each species' internal order) and collapses
/// repeated neighbours.
pub fn canonicalize(word: &[Generator]) -> Monomial {
    let mut bob: Vec<Generator> = Vec::with_capacity(word.len());
    let mut eve: Vec<Generator> = Vec::new();
    for &g in word {
        let seg = match g {
            Generator::Identity => continue,
            Generator::Bob(_) => &mut bob,
            Generator::Eve(_) => &mut eve,
        };
        if seg.last() != Some(&g) {
            seg.push(g);
        }
    }
    bob.extend(eve);
    Monomial { word: bob }
}

/// Ordered monomial basis of the moment matrix.
#[derive(Clone, Debug)]
pub struct MonomialSet {
    n: usize,
    monomials: Vec<Monomial>,
    index: HashMap<Monomial, usize>,
}

impl MonomialSet {
    /// A custom basis. Monomials are canonicalized, deduplicated and sorted.
    pub fn from_monomials(n: usize, monomials: impl IntoIterator<Item = Monomial>) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("need at least 2 settings, got {n}")));
        }
        let pairs = pair_count(n);
        let mut list: Vec<Monomial> = monomials
            .into_iter()
            .map(|m| canonicalize(m.word()))
            .collect();
        for m in &list {
            for g in m.word() {
                match *g {
                    Generator::Bob(y) if y >= n => {
                        return Err(invalid(format!("Bob setting {y} out of range for n = {n}")))
                    }
                    Generator::Eve(r) if r >= pairs => {
                        return Err(invalid(format!("Eve pair {r} out of range for n = {n}")))
                    }
                    _ => {}
                }
            }
        }
        list.sort();
        list.dedup();
        let index = list.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(Self {
            n,
            monomials: list,
            index,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn get(&self, i: usize) -> &Monomial {
        &self.monomials[i]
    }

    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.index.get(m).copied()
    }

    /// A pair `(S, T)` of basis elements with `S†T = target`, if any.
    pub fn find_product(&self, target: &Monomial) -> Option<(usize, usize)> {
        for (i, s) in self.monomials.iter().enumerate() {
            for (j, t) in self.monomials.iter().enumerate() {
                if s.adjoint_mul(t) == *target {
                    return Some((i, j));
                }
            }
        }
        None
    }
}

/// Hierarchy levels 1 and 2.
///
/// Level 1 is `{1} ∪ {B_y} ∪ {E_r}`; level 2 adds `B_y B_y'` (`y ≠ y'`),
/// `E_r E_r'` (`r ≠ r'`) and `B_y E_r`. With `include_objective`, any missing
/// `B_y E_r` product needed by the guessing-probability objective is added.
pub fn generate_monomials(n: usize, level: u8, include_objective: bool) -> Result<MonomialSet> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 settings, got {n}")));
    }
    if !(1..=2).contains(&level) {
        return Err(invalid(format!("hierarchy level must be 1 or 2, got {level}")));
    }
    let pairs = pair_count(n);
    let bobs: Vec<Generator> = (0..n).map(Generator::Bob).collect();
    let eves: Vec<Generator> = (0..pairs).map(Generator::Eve).collect();

    let mut list = vec![Monomial::identity()];
    list.extend(bobs.iter().map(|&g| canonicalize(&[g])));
    list.extend(eves.iter().map(|&g| canonicalize(&[g])));
    if level >= 2 {
        for &a in &bobs {
            for &b in &bobs {
                if a != b {
                    list.push(canonicalize(&[a, b]));
                }
            }
        }
        for &a in &eves {
            for &b in &eves {
                if a != b {
                    list.push(canonicalize(&[a, b]));
                }
            }
        }
        for &a in &bobs {
            for &b in &eves {
                list.push(canonicalize(&[a, b]));
            }
        }
    }
    let mut set = MonomialSet::from_monomials(n, list)?;
    if include_objective {
        let mut extra = Vec::new();
        for y in 0..n {
            for r in 0..pairs {
                let target = canonicalize(&[Generator::Bob(y), Generator::Eve(r)]);
                if set.find_product(&target).is_none() {
                    extra.push(target);
                }
            }
        }
        if !extra.is_empty() {
            let all = set.monomials.iter().cloned().chain(extra);
            set = MonomialSet::from_monomials(n, all)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Generator::*;

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize(&[Bob(1), Bob(1)]).word(), &[Bob(1)]);
        assert_eq!(canonicalize(&[Eve(0), Bob(2)]).word(), &[Bob(2), Eve(0)]);
        assert_eq!(
            canonicalize(&[Bob(0), Identity, Bob(0), Eve(1), Eve(1)]).word(),
            &[Bob(0), Eve(1)]
        );
        assert!(canonicalize(&[Identity, Identity]).is_identity());
        // Distinct settings do not commute and do not annihilate.
        assert_eq!(canonicalize(&[Bob(0), Bob(1), Bob(0)]).word(), &[Bob(0), Bob(1), Bob(0)]);
        // Commutation can expose new repeats.
        assert_eq!(canonicalize(&[Bob(0), Eve(2), Bob(0)]).word(), &[Bob(0), Eve(2)]);
    }

    #[test]
    fn monomial_counts() {
        let s = generate_monomials(2, 1, true).unwrap();
        assert_eq!(s.len(), 4);
        let s = generate_monomials(3, 1, true).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(3 * s.len(), 21);
        let s = generate_monomials(3, 2, true).unwrap();
        assert_eq!(s.len(), 28);
        assert_eq!(3 * s.len(), 84);
        assert!(generate_monomials(3, 3, true).is_err());
        assert!(generate_monomials(1, 1, true).is_err());
    }

    #[test]
    fn ordering_is_graded_lexicographic() {
        let s = generate_monomials(2, 2, false).unwrap();
        let names: Vec<String> = s.monomials().iter().map(|m| m.to_string()).collect();
        assert_eq!(names, ["1", "B0", "B1", "E0", "B0.B1", "B0.E0", "B1.B0", "B1.E0"]);
    }

    #[test]
    fn objective_products_reachable_at_level_one() {
        let s = generate_monomials(4, 1, true).unwrap();
        for y in 0..4 {
            for r in 0..6 {
                assert!(s.find_product(&canonicalize(&[Bob(y), Eve(r)])).is_some());
            }
        }
        // n = 2: identity, two Bob operators and one Eve operator.
        let s = generate_monomials(2, 1, true).unwrap();
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn parse_display_round_trip() {
        let m = canonicalize(&[Bob(2), Bob(0), Eve(3)]);
        let back: Monomial = m.to_string().parse().unwrap();
        assert_eq!(back, m);
        assert!("X3".parse::<Monomial>().is_err());
    }

    #[test]
    fn out_of_range_generators_rejected() {
        assert!(MonomialSet::from_monomials(2, [Monomial::bob(2)]).is_err());
        assert!(MonomialSet::from_monomials(3, [Monomial::eve(3)]).is_err());
    }

    fn generator() -> impl Strategy<Value = Generator> {
        prop_oneof![Just(Identity), (0usize..3).prop_map(Bob), (0usize..3).prop_map(Eve)]
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(word in prop::collection::vec(generator(), 0..=6)) {
            let once = canonicalize(&word);
            let twice = canonicalize(once.word());
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.adjoint().adjoint(), once);
        }

        #[test]
        fn canonical_words_keep_species_order(word in prop::collection::vec(generator(), 0..=6)) {
            let m = canonicalize(&word);
            let eve_pos = m.word().iter().position(|g| matches!(g, Eve(_)));
            if let Some(p) = eve_pos {
                prop_assert!(m.word()[p..].iter().all(|g| matches!(g, Eve(_))));
            }
            prop_assert!(m.word().windows(2).all(|w| w[0] != w[1]));
        }
    }
}
