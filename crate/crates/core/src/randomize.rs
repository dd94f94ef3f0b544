//! Sampling from, and exhaustive enumeration of, the two-stage complete
//! randomization: `N1` of `N` households uniformly at random, then one member
//! uniformly at random inside each treated household.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Assignment, ExperimentDesign};

/// Default bound on the number of assignments an enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// A ChaCha8 generator addressed by `(seed, stream)`.
///
/// ChaCha output is specified bit-for-bit, so a given `(seed, stream)` pair
/// yields the same sequence on every platform. Independent replicates use the
/// same seed with distinct stream ids.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draws one assignment: a uniform size-`N1` subset of households via a
/// partial Fisher-Yates shuffle, then a uniform treated member in each
/// treated household, visited in household order.
pub fn draw_assignment<R: Rng + ?Sized>(design: &ExperimentDesign, rng: &mut R) -> Assignment {
    let sizes = design.household_sizes();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let (chosen, _) = order.partial_shuffle(rng, design.num_treated());
    let mut treated = vec![false; sizes.len()];
    for &i in chosen.iter() {
        treated[i] = true;
    }
    let members = sizes
        .iter()
        .zip(&treated)
        .map(|(&n, &t)| t.then(|| rng.random_range(0..n)))
        .collect();
    Assignment::new(members)
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Number of valid assignments: the elementary symmetric polynomial of degree
/// `N1` in the household sizes (each treated subset `S` contributes
/// `Π_{i in S} n_i` second-stage draws).
pub fn count_assignments(design: &ExperimentDesign) -> u128 {
    let k = design.num_treated();
    let mut e = vec![0u128; k + 1];
    e[0] = 1;
    for &n in design.household_sizes() {
        for d in (1..=k).rev() {
            e[d] = e[d].saturating_add(e[d - 1].saturating_mul(n as u128));
        }
    }
    e[k]
}

/// The exact randomization distribution of a desk-scale design.
#[derive(Debug, Clone)]
pub struct AssignmentSpace {
    design: ExperimentDesign,
    count: u128,
}

impl AssignmentSpace {
    pub fn new(design: &ExperimentDesign) -> Result<Self> {
        Self::with_cap(design, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap(design: &ExperimentDesign, cap: u128) -> Result<Self> {
        let count = count_assignments(design);
        if count > cap {
            return Err(Error::Capacity {
                required: count,
                cap,
            });
        }
        Ok(Self {
            design: design.clone(),
            count,
        })
    }

    pub fn design(&self) -> &ExperimentDesign {
        &self.design
    }

    pub fn len(&self) -> u128 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Every assignment exactly once, paired with its probability
    /// `[C(N, N1) Π_{i: H_i = 1} n_i]^{-1}`.
    ///
    /// Order: treated-household subsets in lexicographic order of their
    /// sorted index tuples; within a subset, treated-member indices as an
    /// odometer with the last treated household varying fastest.
    pub fn iter(&self) -> Assignments<'_> {
        let k = self.design.num_treated();
        Assignments {
            sizes: self.design.household_sizes(),
            subset: (0..k).collect(),
            members: vec![0; k],
            subset_prob: 1.0 / binomial(self.design.num_households(), k) as f64,
            done: false,
        }
    }
}

pub struct Assignments<'a> {
    sizes: &'a [usize],
    subset: Vec<usize>,
    members: Vec<usize>,
    subset_prob: f64,
    done: bool,
}

impl Assignments<'_> {
    fn advance(&mut self) {
        // odometer over treated members
        for pos in (0..self.members.len()).rev() {
            self.members[pos] += 1;
            if self.members[pos] < self.sizes[self.subset[pos]] {
                return;
            }
            self.members[pos] = 0;
        }
        // next subset in lexicographic order
        let n = self.sizes.len();
        let k = self.subset.len();
        for pos in (0..k).rev() {
            if self.subset[pos] < n - k + pos {
                self.subset[pos] += 1;
                for q in pos + 1..k {
                    self.subset[q] = self.subset[q - 1] + 1;
                }
                return;
            }
        }
        self.done = true;
    }
}

impl Iterator for Assignments<'_> {
    type Item = (Assignment, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut treated = vec![None; self.sizes.len()];
        let mut prob = self.subset_prob;
        for (&i, &j) in self.subset.iter().zip(&self.members) {
            treated[i] = Some(j);
            prob /= self.sizes[i] as f64;
        }
        self.advance();
        Some((Assignment::new(treated), prob))
    }
}

/// Inverse inclusion probabilities of one household.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InclusionWeights {
    /// `w^(11) = (N / N1) n_i`
    pub treated: f64,
    /// `w^(10) = (N / N1) n_i / (n_i - 1)`
    pub spillover: f64,
    /// `w^(00) = N / N0`
    pub control: f64,
}

pub fn inclusion_weights(design: &ExperimentDesign) -> Vec<InclusionWeights> {
    let n = design.num_households() as f64;
    let to_treated = n / design.num_treated() as f64;
    let to_control = n / design.num_control() as f64;
    design
        .household_sizes()
        .iter()
        .map(|&size| {
            let s = size as f64;
            InclusionWeights {
                treated: to_treated * s,
                spillover: to_treated * s / (s - 1.0),
                control: to_control,
            }
        })
        .collect()
}
