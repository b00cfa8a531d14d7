//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptr_core::{PairedScores, Query};

const WORDS: &[&str] = &[
    "the", "train", "leaves", "at", "noon", "and", "arrives", "three", "hours", "later", "how", "many", "apples",
    "does", "she", "have", "left", "after", "giving", "away", "half", "of", "them", "to", "her", "friend",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sentence(rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// `n` queries, roughly a tenth of them near-copies of an earlier one.
pub fn queries(seed: u64, n: usize) -> Vec<Query> {
    let mut rng = rng(seed);
    let mut out: Vec<Query> = Vec::with_capacity(n);
    for i in 0..n {
        let text = if i > 0 && rng.random_bool(0.1) {
            let j = rng.random_range(0..i);
            format!("{} indeed", out[j].text)
        } else {
            sentence(&mut rng, 20)
        };
        out.push(Query::new(format!("q{i}"), text));
    }
    out
}

pub fn paired(seed: u64, n: usize) -> PairedScores {
    let mut rng = rng(seed);
    let weak: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let strong = weak.iter().map(|w| w + rng.random_range(-0.3..0.6)).collect();
    PairedScores::new(weak, strong).expect("finite paired scores")
}
