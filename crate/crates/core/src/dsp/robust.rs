//! IQR-fence outlier masking.

use crate::error::{Error, Result};

/// Quantile with linear interpolation between order statistics: the value
/// at fractional position `p * (n - 1)` of the sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Mask values outside `[Q1 - k*IQR, Q3 + k*IQR]`, computed over the present
/// values. Masked and already-missing slots come back as `None`.
pub fn iqr_mask(values: &[Option<f64>], k: f64) -> Result<Vec<Option<f64>>> {
    if !(k.is_finite() && k >= 0.0) {
        return Err(Error::Config(format!("iqr fence multiplier {k} must be finite and >= 0")));
    }
    let mut present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: present.len(),
        });
    }
    present.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile(&present, 0.25);
    let q3 = quantile(&present, 0.75);
    let iqr = q3 - q1;
    let lo = q1 - k * iqr;
    let hi = q3 + k * iqr;
    Ok(values
        .iter()
        .map(|v| v.filter(|x| (lo..=hi).contains(x)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(values: &[f64]) -> Vec<Option<f64>> {
        values.iter().map(|&v| Some(v)).collect()
    }

    #[test]
    fn quartiles_interpolate_linearly() {
        // 1..9 plus an outlier: Q1 = 3.25, Q3 = 7.75, upper fence 14.5.
        let data: Vec<f64> = (1..=9).map(f64::from).chain([100.0]).collect();
        let q1 = quantile(&data, 0.25);
        let q3 = quantile(&data, 0.75);
        assert_eq!(q1, 3.25);
        assert_eq!(q3, 7.75);
        let masked = iqr_mask(&dense(&data), 1.5).unwrap();
        assert_eq!(masked[9], None);
        assert!(masked[..9].iter().all(|v| v.is_some()));
    }

    #[test]
    fn missing_slots_stay_missing() {
        let mut values = dense(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        values.insert(2, None);
        let masked = iqr_mask(&values, 1.5).unwrap();
        assert_eq!(masked[2], None);
        assert_eq!(masked.iter().flatten().count(), 5);
    }

    #[test]
    fn needs_at_least_four_present_values() {
        let values = dense(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            iqr_mask(&values, 1.5),
            Err(Error::InsufficientData { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn zero_k_masks_everything_outside_the_box() {
        let data: Vec<f64> = (1..=8).map(f64::from).collect();
        let masked = iqr_mask(&dense(&data), 0.0).unwrap();
        // Q1 = 2.75, Q3 = 6.25: 1, 2, 7, 8 fall outside.
        let kept: Vec<f64> = masked.iter().flatten().copied().collect();
        assert_eq!(kept, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn fences_are_inclusive() {
        // Values exactly on a fence survive.
        let data = vec![0.0, 1.0, 2.0, 3.0];
        // Q1 = 0.75, Q3 = 2.25, IQR = 1.5; k = 0.5 -> fences [0, 3].
        let masked = iqr_mask(&dense(&data), 0.5).unwrap();
        assert!(masked.iter().all(|v| v.is_some()));
    }
}
