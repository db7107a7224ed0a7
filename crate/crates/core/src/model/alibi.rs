use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-head linear distance penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlibiBias {
    pub slopes: Vec<f64>,
}

fn power_of_two_slopes(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 2f64.powf(-8.0 * i as f64 / n as f64)).collect()
}

/// Head `i` of `n` (power of two) gets slope `2^(-8i/n)`. Other head counts take
/// the slopes of the nearest lower power of two plus every other slope of the
/// next power of two; the combined set is returned in descending order.
pub fn alibi_slopes(n_heads: usize) -> Result<AlibiBias> {
    if n_heads == 0 {
        return Err(Error::Config("ALiBi needs at least one head".into()));
    }
    let mut slopes = if n_heads.is_power_of_two() {
        power_of_two_slopes(n_heads)
    } else {
        let closest = 1usize << n_heads.ilog2();
        let mut s = power_of_two_slopes(closest);
        s.extend(
            power_of_two_slopes(2 * closest)
                .into_iter()
                .step_by(2)
                .take(n_heads - closest),
        );
        s
    };
    slopes.sort_by(|a, b| b.total_cmp(a));
    Ok(AlibiBias { slopes })
}

/// `bias[i][j] = -slope * |i - j|`
pub fn alibi_bias_matrix(seq_len: usize, slope: f64) -> Tensor {
    let mut data = Vec::with_capacity(seq_len * seq_len);
    for i in 0..seq_len {
        for j in 0..seq_len {
            data.push(-slope * i.abs_diff(j) as f64);
        }
    }
    Tensor::new(vec![seq_len, seq_len], data).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eight_heads() {
        let s = alibi_slopes(8).unwrap().slopes;
        let expected: Vec<f64> = (1..=8).map(|i| 0.5f64.powi(i)).collect();
        assert_eq!(s, expected);
    }

    #[test]
    fn one_head() {
        assert_eq!(alibi_slopes(1).unwrap().slopes, [2f64.powi(-8)]);
    }

    #[test]
    fn zero_heads_is_an_error() {
        assert!(alibi_slopes(0).is_err());
    }

    #[test]
    fn six_heads_use_interleaved_rule() {
        let s = alibi_slopes(6).unwrap().slopes;
        let mut expected: Vec<f64> = vec![0.25, 0.0625, 0.015625, 0.00390625, 0.5, 0.125];
        expected.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(s, expected);
    }

    #[test]
    fn bias_values() {
        let m = alibi_bias_matrix(5, 0.25);
        assert_eq!(m.data()[0 * 5 + 3], -0.75);
        for i in 0..5 {
            assert_eq!(m.data()[i * 5 + i], 0.0);
            for j in 0..5 {
                assert_eq!(m.data()[i * 5 + j], m.data()[j * 5 + i]);
            }
        }
    }

    proptest! {
        #[test]
        fn slopes_positive_and_decreasing(n in 1usize..64) {
            let s = alibi_slopes(n).unwrap().slopes;
            prop_assert_eq!(s.len(), n);
            prop_assert!(s.iter().all(|&x| x > 0.0));
            prop_assert!(s.windows(2).all(|w| w[0] > w[1]));
        }
    }
}
