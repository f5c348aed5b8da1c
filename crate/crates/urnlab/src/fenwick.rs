//! Fenwick (binary indexed) tree over f64 weights with logarithmic
//! prefix sums, point updates, and inverse-CDF descent. Used as the
//! urn-selection index: weight i is the total event rate of urn i.

#[derive(Debug, Clone)]
pub struct FenwickTree {
    /// 1-based implicit tree; tree[0] unused.
    tree: Vec<f64>,
    len: usize,
}

impl FenwickTree {
    /// O(n) construction.
    pub fn from_weights(weights: &[f64]) -> Self {
        let len = weights.len();
        let mut tree = vec![0.0; len + 1];
        tree[1..].copy_from_slice(weights);
        for i in 1..=len {
            let parent = i + (i & i.wrapping_neg());
            if parent <= len {
                tree[parent] += tree[i];
            }
        }
        FenwickTree { tree, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sum of the first `n` weights (0-based indices 0..n).
    pub fn prefix_sum(&self, n: usize) -> f64 {
        debug_assert!(n <= self.len);
        let mut i = n;
        let mut acc = 0.0;
        while i > 0 {
            acc += self.tree[i];
            i &= i - 1;
        }
        acc
    }

    pub fn total(&self) -> f64 {
        self.prefix_sum(self.len)
    }

    pub fn add(&mut self, index: usize, delta: f64) {
        debug_assert!(index < self.len);
        let mut i = index + 1;
        while i <= self.len {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Smallest index whose prefix sum exceeds `target`: for target in
    /// [0, total) returns i with prefix_sum(i) <= target < prefix_sum(i+1),
    /// skipping zero-weight entries. Returns `len` when target >= total.
    pub fn descend(&self, mut target: f64) -> usize {
        let mut idx = 0usize;
        let mut bit = self.len.next_power_of_two();
        // next_power_of_two(len) may equal 2*highest_bit(len); the first
        // iterations then simply fail the bounds check.
        while bit != 0 {
            let next = idx + bit;
            if next <= self.len && self.tree[next] <= target {
                target -= self.tree[next];
                idx = next;
            }
            bit >>= 1;
        }
        idx
    }
}
