//! Overlap metric and the iterations-to-target bookkeeping.

use crate::error::{invalid, shape, Result};
use crate::mask::BinaryMask;

/// Iterations allowed before a run counts as failed.
pub const DEFAULT_CAP: usize = 6;
/// Count assigned to failed runs.
pub const DEFAULT_FAILURE_VALUE: f64 = 10.0;

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape(format!("dice between {:?} and {:?} masks", a.shape(), b.shape())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// First 1-based iteration whose Dice reaches `target`, looking at most
/// `cap` iterations deep; `failure_value` otherwise.
pub fn iterations_to_target(dices: &[f64], target: f64, cap: usize, failure_value: f64) -> Result<f64> {
    if dices.is_empty() {
        return Err(invalid("empty trajectory"));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(invalid(format!("target Dice {target} outside (0, 1]")));
    }
    Ok(dices
        .iter()
        .take(cap)
        .position(|&d| d >= target)
        .map_or(failure_value, |i| (i + 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(&[0, 0, 0, 0, 1, 1, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&b, &a).unwrap(), 0.5);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(dice(&a, &mask(&[1])).is_err());
    }

    #[test]
    fn iterations_examples() {
        assert_eq!(iterations_to_target(&[0.6, 0.8, 0.9], 0.85, 6, 10.0).unwrap(), 3.0);
        assert_eq!(iterations_to_target(&[0.9], 0.85, 6, 10.0).unwrap(), 1.0);
        assert_eq!(iterations_to_target(&[0.5; 10], 0.85, 6, 10.0).unwrap(), 10.0);
        // reached only after the cap: still a failure
        let late = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.9];
        assert_eq!(iterations_to_target(&late, 0.85, 6, 10.0).unwrap(), 10.0);
        assert!(iterations_to_target(&[], 0.85, 6, 10.0).is_err());
        assert!(iterations_to_target(&[0.5], 0.0, 6, 10.0).is_err());
    }

    #[test]
    fn monotone_in_target() {
        let traj = [0.3, 0.55, 0.7, 0.72, 0.9, 0.95];
        let mut last = 0.0;
        for t in [0.1, 0.3, 0.5, 0.6, 0.71, 0.8, 0.9, 0.93, 0.96, 1.0] {
            let it = iterations_to_target(&traj, t, 6, 10.0).unwrap();
            assert!(it >= last);
            last = it;
        }
    }
}
