//! Gaussian priors for the admittivity, the boundary coefficients and the
//! electrode angles, and the measurement noise model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Real;

/// Standard deviation of coefficient `l` of a boundary of order `n`:
/// `max(l,1)^{−s}·a` for the cosine group, `(l−n)^{−s}·a` for the sine group.
pub fn coefficient_std<T: Real>(l: usize, order: usize, a: T, s: T) -> T {
    let k = if l <= order { l.max(1) } else { l - order };
    a * T::of_usize(k).powf(-s)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapePrior<T = f64> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Real> ShapePrior<T> {
    pub fn new(order: usize, a: T, s: T, mean: Vec<T>) -> Result<Self> {
        if !(a > T::zero()) || !(s > T::zero()) {
            return Err(Error::InvalidArgument(format!("shape prior needs a, s > 0 (a = {a}, s = {s})")));
        }
        if mean.len() != 2 * order + 1 {
            return Err(Error::Dimension(format!("shape prior mean has {} entries, order {order}", mean.len())));
        }
        let std = (0..=2 * order).map(|l| coefficient_std(l, order, a, s)).collect();
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn with_mean(&self, mean: Vec<T>) -> Result<Self> {
        if mean.len() != self.mean.len() {
            return Err(Error::Dimension("shape prior mean length".into()));
        }
        Ok(Self { mean, std: self.std.clone() })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElectrodePrior<T = f64> {
    mean: Vec<T>,
    tau: T,
}

impl<T: Real> ElectrodePrior<T> {
    pub fn new(mean: Vec<T>, tau: T) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::InvalidArgument(format!("electrode prior needs tau > 0, got {tau}")));
        }
        Ok(Self { mean, tau })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn with_mean(&self, mean: Vec<T>) -> Self {
        Self { mean, tau: self.tau }
    }
}

/// Squared-exponential smoothness prior over the reconstruction grid nodes,
/// `Γ = s²[(1−ν) exp(−|x−y|²/2ℓ²) + ν δ]`. The small nugget `ν` keeps the
/// kernel matrix numerically positive definite without changing the
/// pointwise variance.
#[derive(Clone, Debug)]
pub struct SmoothnessPrior<T = f64> {
    mean_value: T,
    mean: Vec<T>,
    std: T,
    corr_len: T,
    nugget: T,
    chol: Cholesky<T>,
}

pub const DEFAULT_NUGGET: f64 = 1e-4;

impl<T: Real> SmoothnessPrior<T> {
    pub fn new(nodes: &[[T; 2]], mean_value: T, std: T, corr_len: T, nugget: T) -> Result<Self> {
        if !(std > T::zero()) || !(corr_len > T::zero()) || !(mean_value > T::zero()) {
            return Err(Error::InvalidArgument("smoothness prior needs positive mean, std and correlation length".into()));
        }
        if !(nugget >= T::zero()) || nugget >= T::one() {
            return Err(Error::InvalidArgument(format!("nugget must lie in [0, 1), got {nugget}")));
        }
        let cov = Self::covariance_matrix(nodes, std, corr_len, nugget);
        let chol = Cholesky::factor(&cov)?;
        Ok(Self { mean_value, mean: vec![mean_value; nodes.len()], std, corr_len, nugget, chol })
    }

    pub fn covariance_matrix(nodes: &[[T; 2]], std: T, corr_len: T, nugget: T) -> Matrix<T> {
        let var = std * std;
        let inv = T::one() / (T::lit(2.0) * corr_len * corr_len);
        let n = nodes.len();
        Matrix::from_fn(n, n, |i, j| {
            if i == j {
                var
            } else {
                let d0 = nodes[i][0] - nodes[j][0];
                let d1 = nodes[i][1] - nodes[j][1];
                var * (T::one() - nugget) * (-(d0 * d0 + d1 * d1) * inv).exp()
            }
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_value(&self) -> T {
        self.mean_value
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> T {
        self.std
    }

    pub fn corr_len(&self) -> T {
        self.corr_len
    }

    pub fn nugget(&self) -> T {
        self.nugget
    }

    /// Lower Cholesky factor `L` of `Γ = L Lᵀ`.
    pub fn factor(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// Same covariance, new homogeneous mean.
    pub fn with_mean_value(&self, mean_value: T) -> Self {
        Self { mean_value, mean: vec![mean_value; self.mean.len()], ..self.clone() }
    }
}

/// Diagonal noise covariance of the stacked data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel<T = f64> {
    variance: Vec<T>,
    c1: T,
    c2: T,
}

pub const NOISE_C1: f64 = 0.01;
pub const NOISE_C2: f64 = 0.001;

impl<T: Real> NoiseModel<T> {
    /// `c₁²|U_m⁽ʲ⁾|² + c₂² max_{k,l}|U_k⁽ʲ⁾ − U_l⁽ʲ⁾|²` for the stacked clean
    /// voltages of `m` electrodes.
    pub fn from_clean(clean: &[T], m: usize, c1: T, c2: T) -> Result<Self> {
        Ok(Self { variance: noise_variance(clean, m, c1, c2)?, c1, c2 })
    }

    pub fn from_variance(variance: Vec<T>) -> Result<Self> {
        if let Some(v) = variance.iter().find(|v| !(**v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variances must be positive, got {v}")));
        }
        Ok(Self { variance, c1: T::nan(), c2: T::nan() })
    }

    pub fn variance(&self) -> &[T] {
        &self.variance
    }

    pub fn std(&self) -> Vec<T> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// Reciprocal standard deviations, the whitening weights of residuals.
    pub fn weights(&self) -> Vec<T> {
        self.variance.iter().map(|v| T::one() / v.sqrt()).collect()
    }

    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }

    pub fn is_positive(&self) -> bool {
        self.variance.iter().all(|v| *v > T::zero())
    }

    /// `rᵀ Γ_η⁻¹ r`.
    pub fn misfit(&self, residual: &[T]) -> T {
        residual.iter().zip(&self.variance).map(|(&r, &v)| r * r / v).sum()
    }
}

/// Per-entry variances of the simulation noise model.
pub fn noise_variance<T: Real>(clean: &[T], m: usize, c1: T, c2: T) -> Result<Vec<T>> {
    if m == 0 || clean.len() % m != 0 {
        return Err(Error::Dimension(format!("{} voltages for {m} electrodes", clean.len())));
    }
    let mut out = Vec::with_capacity(clean.len());
    for block in clean.chunks(m) {
        let hi = block.iter().copied().fold(T::neg_infinity(), T::max);
        let lo = block.iter().copied().fold(T::infinity(), T::min);
        let spread = c2 * (hi - lo);
        for &u in block {
            let rel = c1 * u;
            out.push(rel * rel + spread * spread);
        }
    }
    Ok(out)
}

/// Value and gradients of the three prior terms of the MAP functional.
#[derive(Clone, Debug)]
pub struct Regularizer<T = f64> {
    pub value: T,
    pub grad_sigma: Vec<T>,
    pub grad_shape: Vec<T>,
    pub grad_angles: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Priors<T = f64> {
    pub sigma: SmoothnessPrior<T>,
    pub shape: ShapePrior<T>,
    pub angles: ElectrodePrior<T>,
}

impl<T: Real> Priors<T> {
    /// Whitened offsets `L⁻¹(x − x★)` of the three blocks; the penalty is
    /// their squared norm.
    pub fn whitened(&self, sigma: &[T], alpha: &[T], theta: &[T]) -> Result<[Vec<T>; 3]> {
        self.check(sigma, alpha, theta)?;
        let ds: Vec<T> = sigma.iter().zip(self.sigma.mean()).map(|(a, b)| *a - *b).collect();
        let ws = self.sigma.factor().solve_lower(&ds);
        let wa = alpha.iter().zip(self.shape.mean()).zip(self.shape.std()).map(|((a, m), s)| (*a - *m) / *s).collect();
        let tau = self.angles.tau();
        let wt = theta.iter().zip(self.angles.mean()).map(|(a, m)| (*a - *m) / tau).collect();
        Ok([ws, wa, wt])
    }

    pub fn regularizer(&self, sigma: &[T], alpha: &[T], theta: &[T]) -> Result<Regularizer<T>> {
        let [ws, wa, wt] = self.whitened(sigma, alpha, theta)?;
        let sq = |v: &[T]| v.iter().map(|x| *x * *x).sum::<T>();
        let value = sq(&ws) + sq(&wa) + sq(&wt);
        let two = T::lit(2.0);
        let grad_sigma = self.sigma.factor().solve_upper(&ws).into_iter().map(|g| two * g).collect();
        let grad_shape = wa.iter().zip(self.shape.std()).map(|(w, s)| two * *w / *s).collect();
        let tau = self.angles.tau();
        let grad_angles = wt.iter().map(|w| two * *w / tau).collect();
        Ok(Regularizer { value, grad_sigma, grad_shape, grad_angles })
    }

    fn check(&self, sigma: &[T], alpha: &[T], theta: &[T]) -> Result<()> {
        if sigma.len() != self.sigma.len() || alpha.len() != self.shape.mean().len() || theta.len() != self.angles.mean().len() {
            return Err(Error::Dimension(format!(
                "state sizes ({}, {}, {}) do not match the priors ({}, {}, {})",
                sigma.len(),
                alpha.len(),
                theta.len(),
                self.sigma.len(),
                self.shape.mean().len(),
                self.angles.mean().len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_law_examples() {
        let p = ShapePrior::new(2, 1.0, 1.0, vec![0.0; 5]).unwrap();
        assert_eq!(p.std(), &[1.0, 1.0, 0.5, 1.0, 0.5]);
        let a1 = coefficient_std(1, 15, 0.1, 1.0);
        let a2 = coefficient_std(2, 15, 0.1, 1.0);
        assert!((a1 - 0.1f64).abs() < 1e-15 && (a2 - 0.05f64).abs() < 1e-15);
        let stiff = ShapePrior::new(3, 1.0, 40.0, vec![0.0; 7]).unwrap();
        for (l, s) in stiff.std().iter().enumerate() {
            let k = if l <= 3 { l } else { l - 3 };
            assert_eq!(*s > 1e-6, k <= 1, "l = {l}");
        }
        assert!(ShapePrior::new(2, 0.0, 1.0, vec![0.0; 5]).is_err());
    }

    #[test]
    fn noise_variance_examples() {
        let v = noise_variance(&[1.0, -9.0], 2, 0.01, 0.001).unwrap();
        assert!((v[0] - 2e-4f64).abs() < 1e-18);
        let z = noise_variance(&[0.0; 6], 3, 0.01, 0.001).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert!(NoiseModel::from_clean(&[0.0; 6], 3, 0.01, 0.001).unwrap().is_positive() == false);
    }

    #[test]
    fn smoothness_prior_factorizes() {
        let nodes: Vec<[f64; 2]> = (0..15).flat_map(|i| (0..15).map(move |j| [i as f64 * 0.1, j as f64 * 0.1])).collect();
        let p = SmoothnessPrior::new(&nodes, 1.0, 0.5, 0.6, DEFAULT_NUGGET).unwrap();
        let l = p.factor().lower();
        for i in 0..nodes.len() {
            let d: f64 = l.row(i)[..=i].iter().map(|x| x * x).sum();
            assert!((d - 0.25).abs() < 1e-12);
        }
    }
}
