//! Shared inputs for the criterion benchmarks in `benches/`.

pub use respagent_core::attention::{attention_cost, default_scale, dense_reference_attention, sparse_attention, spread_global_set, AttentionPattern};
pub use respagent_core::Mat;

use respagent_core::rng::seeded;

/// Random `Q, K, V` of width `d` and a `(w, g)` pattern over `n` positions.
pub fn attention_case(n: usize, w: usize, g: usize, d: usize, seed: u64) -> (Mat, Mat, Mat, AttentionPattern) {
    let mut rng = seeded(seed);
    let q = Mat::randn(n, d, 1.0, &mut rng);
    let k = Mat::randn(n, d, 1.0, &mut rng);
    let v = Mat::randn(n, d, 1.0, &mut rng);
    let pattern = AttentionPattern::new(n, w, spread_global_set(n, g), 0, 0).expect("valid bench pattern");
    (q, k, v, pattern)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_shapes() {
        let (q, _, v, p) = attention_case(64, 4, 8, 16, 0);
        assert_eq!(q.shape(), (64, 16));
        assert_eq!(v.shape(), (64, 16));
        assert_eq!(p.seq_len(), 64);
        assert_eq!(p.global().len(), 8);
    }
}
