//! Walker-Vose alias tables: O(n) construction, O(1) sampling from a
//! fixed discrete distribution. The simulator builds one per categorical
//! choice (event destination, offspring count) since the underlying
//! weights never change during a run.

use rand::Rng;

#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// Build from nonnegative weights; `None` when all weights vanish
    /// (the corresponding event then has total rate zero and is never
    /// sampled). Negative or non-finite weights are a caller bug.
    pub fn new(weights: &[f64]) -> Option<Self> {
        assert!(!weights.is_empty(), "alias table needs at least one entry");
        assert!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "alias weights must be finite and nonnegative"
        );
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        // Scale to mean 1, then split entries into under- and over-full.
        let mut prob: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut alias = vec![0u32; n];
        let mut small: Vec<usize> = (0..n).filter(|&i| prob[i] < 1.0).collect();
        let mut large: Vec<usize> = (0..n).filter(|&i| prob[i] >= 1.0).collect();
        while let (Some(s), Some(l)) = (small.pop(), large.pop()) {
            alias[s] = l as u32;
            // l donates its overflow to s; re-classify the remainder.
            prob[l] = (prob[l] + prob[s]) - 1.0;
            if prob[l] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        // Rounding may leave stragglers in either list; they are full.
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
        }
        Some(AliasTable { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let i = rng.gen_range(0..self.prob.len());
        if rng.gen::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i] as usize
        }
    }
}
