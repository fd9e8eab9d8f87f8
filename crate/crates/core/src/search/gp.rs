//! Minimal Gaussian-process regressor used as the Bayesian-optimization
//! surrogate: RBF kernel over the normalized point encoding, lengthscale
//! from the median pairwise distance, targets standardized before fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Diagonal jitter keeping the kernel matrix positive definite.
const JITTER: f64 = 1e-6;

pub struct Gp {
    x: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lengthscale: f64,
    y_mean: f64,
    y_std: f64,
}

impl Gp {
    /// Fit to encoded points `x` and raw objective values `y`. Returns None
    /// when a useful posterior cannot exist: fewer than two points, (nearly)
    /// constant targets, or a numerically singular kernel matrix.
    pub fn fit(x: Vec<Vec<f64>>, y: &[f64]) -> Option<Gp> {
        let n = x.len();
        if n < 2 || n != y.len() {
            return None;
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let y_std = var.sqrt();
        if !y_std.is_finite() || y_std < 1e-12 * y_mean.abs().max(1.0) {
            return None;
        }

        let mut distances: Vec<f64> = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let d = euclid(&x[i], &x[j]);
                if d > 0.0 {
                    distances.push(d);
                }
            }
        }
        distances.sort_unstable_by(f64::total_cmp);
        let lengthscale = if distances.is_empty() { 1.0 } else { distances[distances.len() / 2] };

        let kernel = DMatrix::from_fn(n, n, |i, j| {
            rbf(&x[i], &x[j], lengthscale) + if i == j { JITTER } else { 0.0 }
        });
        let chol = Cholesky::new(kernel)?;
        let targets = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_std));
        let alpha = chol.solve(&targets);
        Some(Gp { x, chol, alpha, lengthscale, y_mean, y_std })
    }

    /// Posterior mean and standard deviation at `q`, in objective units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| rbf(xi, q, self.lengthscale)));
        let mean = k.dot(&self.alpha);
        let solved = self.chol.solve(&k);
        let var = (1.0 - k.dot(&solved)).max(0.0);
        (self.y_mean + self.y_std * mean, self.y_std * var.sqrt())
    }

    /// Expected improvement over `best` for maximization, with the
    /// exploration margin `xi` expressed in standard deviations of the
    /// observed values.
    pub fn expected_improvement(&self, q: &[f64], best: f64, xi: f64) -> f64 {
        let (mu, sigma) = self.predict(q);
        let gain = mu - best - xi * self.y_std;
        if sigma < 1e-12 {
            return gain.max(0.0);
        }
        let z = gain / sigma;
        let normal = Normal::new(0.0, 1.0).expect("standard normal is well formed");
        gain * normal.cdf(z) + sigma * normal.pdf(z)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn rbf(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * lengthscale * lengthscale)).exp()
}
