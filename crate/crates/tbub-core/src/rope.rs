//! Rotary positions for stream sets, including the fractional variant.
//!
//! A stream at positional rank p of input token k whose group holds q forks
//! sits at rotary position k - p/q: the more forks a token has, the closer
//! together its streams sit. Rank 0 is exactly the integer position k, so a
//! set with no forks reduces to standard RoPE.

use crate::forking::StreamMeta;

pub const DEFAULT_THETA_BASE: f64 = 10000.0;

/// Fractional rotary position per stream row.
pub fn fractional_positions(meta: &[StreamMeta]) -> Vec<f64> {
    // group size per origin token
    let mut group_len = Vec::new();
    for m in meta {
        if group_len.len() <= m.origin {
            group_len.resize(m.origin + 1, 0usize);
        }
        group_len[m.origin] += 1;
    }
    meta.iter()
        .map(|m| {
            let k = m.origin as f64;
            if m.fork_rank == 0 {
                k
            } else {
                let q = (group_len[m.origin] - 1) as f64;
                k - m.fork_rank as f64 / q
            }
        })
        .collect()
}

/// Integer positions 0..n for a plain (unforked) sequence.
pub fn integer_positions(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta(origin: usize, rank: usize) -> StreamMeta {
        StreamMeta {
            origin,
            fork_rank: rank,
        }
    }

    #[test]
    fn rank_zero_is_exactly_the_integer_position() {
        let m: Vec<StreamMeta> = (0..5).map(|i| meta(i, 0)).collect();
        assert_eq!(fractional_positions(&m), integer_positions(5));
    }

    #[test]
    fn two_fork_group_gets_thirds_spacing() {
        // token 3 with q = 2 forks: ranks (2,1,0) sit at 2, 2.5, 3
        let m = vec![
            meta(0, 0),
            meta(1, 0),
            meta(2, 0),
            meta(3, 2),
            meta(3, 1),
            meta(3, 0),
        ];
        let pos = fractional_positions(&m);
        assert_eq!(&pos[..3], &[0.0, 1.0, 2.0]);
        assert!((pos[3] - 2.0).abs() < 1e-15);
        assert!((pos[4] - 2.5).abs() < 1e-15);
        assert_eq!(pos[5], 3.0);
    }

    #[test]
    fn single_fork_sits_one_position_left() {
        // q = 1: the lone fork lands at k - 1/1
        let m = vec![meta(0, 0), meta(1, 1), meta(1, 0)];
        let pos = fractional_positions(&m);
        assert_eq!(pos, vec![0.0, 0.0, 1.0]);
    }

    /// Rotated q/k dot products depend only on position differences: shifting
    /// every position by +10 leaves all attention logits unchanged.
    #[test]
    fn logits_invariant_under_global_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let d = 16;
        let m = vec![
            meta(0, 0),
            meta(1, 1),
            meta(1, 0),
            meta(2, 2),
            meta(2, 1),
            meta(2, 0),
        ];
        let pos = fractional_positions(&m);
        let shifted: Vec<f64> = pos.iter().map(|p| p + 10.0).collect();
        let qm = Matrix::randn(n, d, 1.0, &mut rng);
        let km = Matrix::randn(n, d, 1.0, &mut rng);
        let logits = |positions: &[f64]| {
            let t = Tape::new();
            let q = t.leaf(qm.clone()).rotate_pairs(positions, DEFAULT_THETA_BASE);
            let k = t.leaf(km.clone()).rotate_pairs(positions, DEFAULT_THETA_BASE);
            q.matmul(&k.t()).unwrap().value()
        };
        let base = logits(&pos);
        let moved = logits(&shifted);
        assert!(base.max_abs_diff(&moved) < 1e-9);
    }
}
