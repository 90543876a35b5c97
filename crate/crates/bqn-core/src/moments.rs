/// Per-unit mean and variance of (approximately Gaussian) pre-activations,
/// optionally carrying normalized skewness and kurtosis for the regression
/// head's predictive moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub kappa: Option<Vec<f64>>,
}

impl MomentSummary {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Self {
        debug_assert_eq!(mu.len(), nu.len());
        debug_assert!(nu.iter().all(|&v| v >= 0.0), "variance must be nonnegative");
        Self { mu, nu, gamma: None, kappa: None }
    }

    pub fn with_higher(mu: Vec<f64>, nu: Vec<f64>, gamma: Vec<f64>, kappa: Vec<f64>) -> Self {
        debug_assert_eq!(mu.len(), nu.len());
        debug_assert_eq!(mu.len(), gamma.len());
        debug_assert_eq!(mu.len(), kappa.len());
        debug_assert!(
            gamma
                .iter()
                .zip(&kappa)
                .all(|(&g, &k)| k + 1e-9 >= 1.0 + g * g),
            "moment feasibility requires kappa >= 1 + gamma^2"
        );
        Self { mu, nu, gamma: Some(gamma), kappa: Some(kappa) }
    }

    /// Deterministic values: mean = value, variance = 0.
    pub fn deterministic(values: &[f64]) -> Self {
        Self::new(values.to_vec(), vec![0.0; values.len()])
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}
