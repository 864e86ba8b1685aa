//! Kernel primitives: the Epanechnikov kernel, product-kernel
//! Nadaraya–Watson regression, kernel density estimates and the
//! central-difference operator used for every numerical derivative.
//!
//! Bandwidths are validated once by the public entry points; the inner
//! loops use [`kernel_h`], which assumes `h > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{PrteError, Result};

/// Smoothing parameters for the kernel nuisance fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    /// Instrument-space bandwidth.
    pub h1: f64,
    /// Propensity-space bandwidth.
    pub h2: f64,
    /// Step of the central difference quotients.
    pub delta: f64,
    /// Exponent of the density-ratio shrinkage `x ↦ x^alpha`.
    pub alpha: f64,
}

impl Default for Bandwidths {
    fn default() -> Self {
        Self {
            h1: 2.5,
            h2: 0.25,
            delta: 0.01,
            alpha: 0.25,
        }
    }
}

impl Bandwidths {
    pub fn validate(&self) -> Result<()> {
        check_bandwidth("h1", self.h1)?;
        check_bandwidth("h2", self.h2)?;
        check_bandwidth("delta", self.delta)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.alpha <= 1.0) {
            return Err(PrteError::InvalidBandwidth {
                name: "alpha",
                value: self.alpha,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_bandwidth(name: &'static str, h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(PrteError::InvalidBandwidth { name, value: h })
    }
}

/// Epanechnikov kernel `0.75 (1 - u²)` on `|u| <= 1`.
#[inline]
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// `K(u / h) / h` for a validated `h > 0`.
#[inline]
pub fn kernel_h(u: f64, h: f64) -> f64 {
    epanechnikov(u / h) / h
}

/// `K(u / h) / h`, rejecting non-positive bandwidths.
pub fn scaled_kernel(u: f64, h: f64) -> Result<f64> {
    check_bandwidth("h", h)?;
    Ok(kernel_h(u, h))
}

/// Product kernel `Π_k K_h(a_k - b_k)` with a common bandwidth.
#[inline]
pub fn product_kernel(a: &[f64], b: &[f64], h: f64) -> f64 {
    let mut w = 1.0;
    for (x, y) in a.iter().zip(b) {
        w *= kernel_h(x - y, h);
        if w == 0.0 {
            break;
        }
    }
    w
}

/// A Nadaraya–Watson fit. When no training point falls inside the kernel
/// window the value is the unweighted mean of the targets and
/// `empty_neighborhood` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct NwFit<T> {
    pub value: T,
    pub empty_neighborhood: bool,
}

fn nonempty(len: usize) -> Result<()> {
    if len == 0 {
        Err(PrteError::Dataset("kernel regression needs at least one training point".into()))
    } else {
        Ok(())
    }
}

/// Combines precomputed kernel weights with scalar targets.
pub fn weighted_mean(weights: &[f64], targets: &[f64]) -> NwFit<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (w, t) in weights.iter().zip(targets) {
        if *w != 0.0 {
            num += w * t;
            den += w;
        }
    }
    if den > 0.0 {
        NwFit {
            value: num / den,
            empty_neighborhood: false,
        }
    } else {
        NwFit {
            value: targets.iter().sum::<f64>() / targets.len() as f64,
            empty_neighborhood: true,
        }
    }
}

/// Combines one weight vector with every component of vector targets.
pub fn weighted_mean_vec<T: AsRef<[f64]>>(weights: &[f64], targets: &[T]) -> NwFit<Vec<f64>> {
    let dim = targets.first().map_or(0, |t| t.as_ref().len());
    let mut acc = vec![0.0; dim];
    let mut den = 0.0;
    for (w, t) in weights.iter().zip(targets) {
        if *w != 0.0 {
            for (a, v) in acc.iter_mut().zip(t.as_ref()) {
                *a += w * v;
            }
            den += w;
        }
    }
    let empty = den <= 0.0;
    if empty {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for t in targets {
            for (a, v) in acc.iter_mut().zip(t.as_ref()) {
                *a += v;
            }
        }
        den = targets.len() as f64;
    }
    acc.iter_mut().for_each(|a| *a /= den);
    NwFit {
        value: acc,
        empty_neighborhood: empty,
    }
}

/// Nadaraya–Watson regression of scalar targets on d-dimensional points
/// with a product Epanechnikov kernel.
pub fn nw_regress<P: AsRef<[f64]>>(
    train_points: &[P],
    train_targets: &[f64],
    query: &[f64],
    h: f64,
) -> Result<NwFit<f64>> {
    check_bandwidth("h", h)?;
    nonempty(train_points.len())?;
    let weights: Vec<f64> = train_points
        .iter()
        .map(|x| product_kernel(x.as_ref(), query, h))
        .collect();
    Ok(weighted_mean(&weights, train_targets))
}

/// Vector-target variant of [`nw_regress`]; the weights are shared across
/// components.
pub fn nw_regress_vec<P: AsRef<[f64]>, T: AsRef<[f64]>>(
    train_points: &[P],
    train_targets: &[T],
    query: &[f64],
    h: f64,
) -> Result<NwFit<Vec<f64>>> {
    check_bandwidth("h", h)?;
    nonempty(train_points.len())?;
    let weights: Vec<f64> = train_points
        .iter()
        .map(|x| product_kernel(x.as_ref(), query, h))
        .collect();
    Ok(weighted_mean_vec(&weights, train_targets))
}

/// Univariate Nadaraya–Watson regression.
pub fn nw_regress_1d(train: &[f64], targets: &[f64], query: f64, h: f64) -> Result<NwFit<f64>> {
    check_bandwidth("h", h)?;
    nonempty(train.len())?;
    let weights: Vec<f64> = train.iter().map(|x| kernel_h(x - query, h)).collect();
    Ok(weighted_mean(&weights, targets))
}

/// Univariate kernel density estimate `(1/normalizer) Σ_j K_h(x_j - query)`.
pub fn kde(train_values: &[f64], query: f64, h: f64, normalizer: f64) -> Result<f64> {
    check_bandwidth("h", h)?;
    nonempty(train_values.len())?;
    if !(normalizer > 0.0) {
        return Err(PrteError::Config(format!("kde normalizer must be positive, got {normalizer}")));
    }
    Ok(kde_sum(train_values, query, h) / normalizer)
}

#[inline]
pub(crate) fn kde_sum(train_values: &[f64], query: f64, h: f64) -> f64 {
    train_values.iter().map(|x| kernel_h(x - query, h)).sum()
}

/// Product-kernel density estimate in d dimensions.
pub fn kde_product<P: AsRef<[f64]>>(
    train_points: &[P],
    query: &[f64],
    h: f64,
    normalizer: f64,
) -> Result<f64> {
    check_bandwidth("h", h)?;
    nonempty(train_points.len())?;
    if !(normalizer > 0.0) {
        return Err(PrteError::Config(format!("kde normalizer must be positive, got {normalizer}")));
    }
    let sum: f64 = train_points
        .iter()
        .map(|x| product_kernel(x.as_ref(), query, h))
        .sum();
    Ok(sum / normalizer)
}

/// `(f(p + delta) - f(p - delta)) / (2 delta)`.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, p: f64, delta: f64) -> f64 {
    (f(p + delta) - f(p - delta)) / (2.0 * delta)
}

/// Componentwise central difference of a vector-valued map.
pub fn central_difference_vec<F: Fn(f64) -> Vec<f64>>(f: F, p: f64, delta: f64) -> Vec<f64> {
    let hi = f(p + delta);
    let lo = f(p - delta);
    hi.iter()
        .zip(&lo)
        .map(|(a, b)| (a - b) / (2.0 * delta))
        .collect()
}

/// Central difference of a fallible vector-valued map.
pub fn try_central_difference_vec<E, F>(f: F, p: f64, delta: f64) -> std::result::Result<Vec<f64>, E>
where
    F: Fn(f64) -> std::result::Result<Vec<f64>, E>,
{
    let hi = f(p + delta)?;
    let lo = f(p - delta)?;
    Ok(hi
        .iter()
        .zip(&lo)
        .map(|(a, b)| (a - b) / (2.0 * delta))
        .collect())
}

/// Density-ratio shrinkage `ρ(x) = x^alpha`.
#[inline]
pub fn shrink_ratio(x: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        x
    } else {
        x.powf(alpha)
    }
}
