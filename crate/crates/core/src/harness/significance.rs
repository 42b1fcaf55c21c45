//! Matched-pairs segment error test (normal approximation).
//!
//! Each segment is one test utterance. With per-segment differences
//! `dᵢ = eᵢ(A) − eᵢ(B)`, the statistic is `z = mean(d) / (sd(d) / √n)` using
//! the sample standard deviation, and the difference is significant when
//! `|z|` exceeds the two-sided critical value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided critical value at α = 0.05.
pub const Z_CRITICAL_005: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPairsResult {
    pub segments: usize,
    pub mean_difference: f64,
    pub std_difference: f64,
    /// Zero when the test is degenerate.
    pub z: f64,
    pub significant: bool,
    /// The differences have zero variance, so `z` is undefined.
    pub degenerate: bool,
}

pub fn mapsswe_test(errors_a: &[f64], errors_b: &[f64]) -> Result<MatchedPairsResult> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::Data(format!(
            "segment counts differ: {} vs {}",
            errors_a.len(),
            errors_b.len()
        )));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(Error::Data(
            "matched-pairs test needs at least 2 segments".into(),
        ));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(MatchedPairsResult {
            segments: n,
            mean_difference: mean,
            std_difference: 0.0,
            z: 0.0,
            significant: false,
            degenerate: true,
        });
    }
    let z = mean / (sd / (n as f64).sqrt());
    Ok(MatchedPairsResult {
        segments: n,
        mean_difference: mean,
        std_difference: sd,
        z,
        significant: z.abs() > Z_CRITICAL_005,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_systems() {
        let e = [1.0, 0.0, 2.0, 1.0];
        let r = mapsswe_test(&e, &e).unwrap();
        assert_eq!(r.z, 0.0);
        assert!(!r.significant);
    }

    #[test]
    fn constant_difference_is_degenerate() {
        let a = vec![2.0; 100];
        let b = vec![1.0; 100];
        let r = mapsswe_test(&a, &b).unwrap();
        assert!(r.degenerate);
        assert!(!r.significant);
    }

    #[test]
    fn planted_shift() {
        // d alternates 2, 0: mean 1, sample variance 100/99
        let a: Vec<f64> = (0..100)
            .map(|i| if i % 2 == 0 { 2.0 } else { 0.0 })
            .collect();
        let b = vec![0.0; 100];
        let r = mapsswe_test(&a, &b).unwrap();
        let expected = 1.0 / ((100.0f64 / 99.0).sqrt() / 10.0);
        assert!((r.z - expected).abs() < 1e-12);
        assert!((r.z - 9.949_874_371).abs() < 1e-8);
        assert!(r.significant);
    }

    #[test]
    fn swapping_systems_negates_z() {
        let a = [3.0, 1.0, 0.0, 2.0, 5.0];
        let b = [1.0, 1.0, 2.0, 0.0, 1.0];
        let ab = mapsswe_test(&a, &b).unwrap();
        let ba = mapsswe_test(&b, &a).unwrap();
        assert_eq!(ab.z, -ba.z);
    }

    #[test]
    fn input_validation() {
        assert!(mapsswe_test(&[1.0], &[1.0]).is_err());
        assert!(mapsswe_test(&[1.0, 2.0], &[1.0]).is_err());
    }
}
