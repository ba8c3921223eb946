//! Per-subject standardization.

use crate::error::{Error, Result};

/// Z-score the present values in place of their population statistics:
/// `(x - mean) / sd` with the uncorrected (1/n) standard deviation.
/// Missing slots stay missing. A zero-spread signal is an error.
pub fn zscore(values: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let var = present.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateSignal(
            "zero variance, cannot standardize".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(values
        .iter()
        .map(|v| v.map(|x| (x - mean) / sd))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn three_point_oracle() {
        let z = zscore(&[Some(1.0), Some(2.0), Some(3.0)]).unwrap();
        let want = 1.224744871391589; // sqrt(3/2)
        assert_relative_eq!(z[0].unwrap(), -want, max_relative = 1e-12);
        assert_eq!(z[1], Some(0.0));
        assert_relative_eq!(z[2].unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn constant_signal_is_degenerate() {
        let r = zscore(&[Some(5.0), Some(5.0), Some(5.0)]);
        assert!(matches!(r, Err(Error::DegenerateSignal(_))));
    }

    #[test]
    fn missing_slots_pass_through() {
        let z = zscore(&[Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!(z[1], None);
        assert_eq!(z[0], Some(-1.0));
        assert_eq!(z[2], Some(1.0));
    }

    #[test]
    fn output_is_standardized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Option<f64>> = (0..500)
            .map(|_| Some(rng.gen_range(-10.0..50.0)))
            .collect();
        let z = zscore(&x).unwrap();
        let vals: Vec<f64> = z.iter().flatten().copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}
