use crate::error::{BqnError, Result};

/// The ordered value set shared by quantized weights and activations.
///
/// Values must be strictly increasing with at least two levels. Operations on
/// the FFT path additionally require the grid to be an affine image of
/// consecutive integers (equal spacing), e.g. {-1, 1} maps to {0, 1} via
/// v = 2u - 1.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationGrid {
    values: Vec<f64>,
}

impl QuantizationGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(BqnError::InvalidParameter(format!(
                "grid needs at least 2 levels, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BqnError::InvalidParameter("grid values must be finite".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BqnError::InvalidParameter(
                "grid values must be strictly increasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// The binary grid {-1, 1} used throughout the paper's experiments.
    pub fn binary() -> Self {
        Self { values: vec![-1.0, 1.0] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, d: usize) -> f64 {
        self.values[d]
    }

    /// Returns (offset, step) such that value(k) = offset + step * k, if the
    /// grid is equally spaced (an affine image of consecutive integers).
    pub fn integer_affine(&self) -> Option<(f64, f64)> {
        let step = self.values[1] - self.values[0];
        let ok = self
            .values
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-12 * step.abs().max(1.0));
        if ok {
            Some((self.values[0], step))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_and_unsorted() {
        assert!(QuantizationGrid::new(vec![1.0]).is_err());
        assert!(QuantizationGrid::new(vec![1.0, 1.0]).is_err());
        assert!(QuantizationGrid::new(vec![1.0, -1.0]).is_err());
        assert!(QuantizationGrid::new(vec![-1.0, f64::NAN]).is_err());
    }

    #[test]
    fn binary_is_integer_affine() {
        let g = QuantizationGrid::binary();
        let (offset, step) = g.integer_affine().unwrap();
        assert_eq!(offset, -1.0);
        assert_eq!(step, 2.0);
    }

    #[test]
    fn uneven_spacing_is_not_affine() {
        let g = QuantizationGrid::new(vec![0.0, 1.0, 3.0]).unwrap();
        assert!(g.integer_affine().is_none());
    }
}
