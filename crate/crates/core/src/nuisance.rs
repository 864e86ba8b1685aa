//! Kernel estimates of the preliminary functions entering the orthogonal
//! score. Every fit here is computed from one training sample (a fold
//! complement) and evaluated elsewhere; fitted objects are immutable.
//!
//! Layout of `ξ1` values: with `v` the stacked, propensity-weighted
//! feature residual (length `2p`) and `r` the outcome residual, the vector
//! is the column-major vectorisation of the `2p × (2p+1)` matrix `v (v', r)`:
//! the first `4p²` entries are `vec(v v')`, the last `2p` entries are `v r`.

use crate::dataset::Dataset;
use crate::diagnostics::Diagnostics;
use crate::error::{PrteError, Result};
use crate::kernel::{
    central_difference, central_difference_vec, kde_sum, kernel_h, product_kernel, shrink_ratio,
    weighted_mean, weighted_mean_vec, Bandwidths, NwFit,
};
use crate::policy::Policy;

/// Default bound keeping fitted propensities inside `[ε, 1 - ε]`.
pub const DEFAULT_PROPENSITY_CLAMP: f64 = 0.001;

fn clamp_propensity(p: f64, eps: f64, diag: &Diagnostics) -> f64 {
    if p < eps {
        diag.propensity_clamp();
        eps
    } else if p > 1.0 - eps {
        diag.propensity_clamp();
        1.0 - eps
    } else {
        p
    }
}

fn record<T>(fit: NwFit<T>, diag: &Diagnostics) -> T {
    diag.empty_neighborhood(fit.empty_neighborhood);
    fit.value
}

/// Nadaraya–Watson propensity `E[S | Z]` with a product kernel on the
/// instruments.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    z: Vec<Vec<f64>>,
    s: Vec<f64>,
    h: f64,
    clamp: f64,
    loo: Vec<f64>,
}

/// Fits the propensity on `train`. The in-sample values are leave-one-out:
/// training observation `i` is excluded from its own fit.
pub fn fit_propensity(
    train: &Dataset,
    bw: &Bandwidths,
    clamp: f64,
    diag: &Diagnostics,
) -> Result<PropensityFit> {
    bw.validate()?;
    if !(0.0..0.5).contains(&clamp) {
        return Err(PrteError::Config(format!("propensity clamp must lie in [0, 0.5), got {clamp}")));
    }
    let m = train.len();
    if m < 2 {
        return Err(PrteError::Dataset(format!(
            "propensity fit needs at least 2 training observations, got {m}"
        )));
    }
    let z = train.z().to_vec();
    let s = train.s().to_vec();
    let mut weights = vec![0.0; m];
    let mut loo = Vec::with_capacity(m);
    let mut rest = Vec::with_capacity(m - 1);
    for i in 0..m {
        for j in 0..m {
            weights[j] = if j == i { 0.0 } else { product_kernel(&z[j], &z[i], bw.h1) };
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..m {
            num += weights[j] * s[j];
            den += weights[j];
        }
        let value = if den > 0.0 {
            num / den
        } else {
            diag.empty_neighborhood(true);
            rest.clear();
            rest.extend((0..m).filter(|&j| j != i).map(|j| s[j]));
            rest.iter().sum::<f64>() / rest.len() as f64
        };
        loo.push(clamp_propensity(value, clamp, diag));
    }
    Ok(PropensityFit {
        z,
        s,
        h: bw.h1,
        clamp,
        loo,
    })
}

impl PropensityFit {
    /// Leave-one-out fitted values at the training observations.
    pub fn loo_values(&self) -> &[f64] {
        &self.loo
    }

    /// Fitted propensity at `z` using every training observation.
    pub fn eval(&self, z: &[f64], diag: &Diagnostics) -> f64 {
        let w: Vec<f64> = self.z.iter().map(|zj| product_kernel(zj, z, self.h)).collect();
        let p = record(weighted_mean(&w, &self.s), diag);
        clamp_propensity(p, self.clamp, diag)
    }
}

/// ρ-regularised ratio of kernel densities of `P*` and `P` on the
/// propensity axis.
#[derive(Debug, Clone)]
pub struct DensityRatio {
    p: Vec<f64>,
    pstar: Vec<f64>,
    h: f64,
    alpha: f64,
    normalizer: f64,
}

/// Fits the density ratio from training propensities and their
/// counterfactual images. `z_train` feeds policies that depend on `z`.
pub fn fit_density_ratio(
    phat_train: &[f64],
    z_train: &[Vec<f64>],
    policy: &Policy,
    bw: &Bandwidths,
    normalizer: f64,
) -> Result<DensityRatio> {
    bw.validate()?;
    if phat_train.is_empty() {
        return Err(PrteError::Dataset("density ratio needs training propensities".into()));
    }
    if !(normalizer > 0.0) {
        return Err(PrteError::Config(format!("kde normalizer must be positive, got {normalizer}")));
    }
    let pstar = phat_train
        .iter()
        .zip(z_train)
        .map(|(p, z)| {
            policy.pstar(*p, z).ok_or_else(|| {
                PrteError::Config("propensity density ratio requires a propensity-shift policy".into())
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DensityRatio {
        p: phat_train.to_vec(),
        pstar,
        h: bw.h2,
        alpha: bw.alpha,
        normalizer,
    })
}

impl DensityRatio {
    /// Raw kernel densities `(f̂_{P*}(p), f̂_P(p))`.
    pub fn densities(&self, p: f64) -> (f64, f64) {
        (
            kde_sum(&self.pstar, p, self.h) / self.normalizer,
            kde_sum(&self.p, p, self.h) / self.normalizer,
        )
    }

    /// `ρ(f̂_{P*}(p) / f̂_P(p))`; returns 1 and records a fallback where the
    /// denominator density vanishes.
    pub fn eval(&self, p: f64, diag: &Diagnostics) -> f64 {
        let (num, den) = self.densities(p);
        if den > 0.0 {
            shrink_ratio(num / den, self.alpha)
        } else {
            diag.ratio_fallback();
            1.0
        }
    }
}

/// Conditional means of `μ0(X)`, `μ1(X)` and `Y` given the propensity at
/// one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CondMeansAt {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub y: f64,
}

/// Univariate Nadaraya–Watson regressions of the features and the outcome
/// on the fitted propensity.
#[derive(Debug, Clone)]
pub struct ConditionalMeans {
    p: Vec<f64>,
    mu0: Vec<Vec<f64>>,
    mu1: Vec<Vec<f64>>,
    y: Vec<f64>,
    h: f64,
}

pub fn fit_conditional_means(train: &Dataset, phat_train: &[f64], bw: &Bandwidths) -> Result<ConditionalMeans> {
    bw.validate()?;
    if train.is_empty() || phat_train.len() != train.len() {
        return Err(PrteError::Dataset(
            "conditional means need one fitted propensity per training observation".into(),
        ));
    }
    Ok(ConditionalMeans {
        p: phat_train.to_vec(),
        mu0: train.mu0().to_vec(),
        mu1: train.mu1().to_vec(),
        y: train.y().to_vec(),
        h: bw.h2,
    })
}

impl ConditionalMeans {
    pub fn eval(&self, p: f64, diag: &Diagnostics) -> CondMeansAt {
        let w: Vec<f64> = self.p.iter().map(|pj| kernel_h(pj - p, self.h)).collect();
        let mu0 = weighted_mean_vec(&w, &self.mu0);
        let mu1 = weighted_mean_vec(&w, &self.mu1);
        let y = weighted_mean(&w, &self.y);
        diag.empty_neighborhood(y.empty_neighborhood);
        CondMeansAt {
            mu0: mu0.value,
            mu1: mu1.value,
            y: y.value,
        }
    }
}

/// Stacked residual `v = ((1-p)(μ0 - ḡ0); p(μ1 - ḡ1))`.
pub fn stacked_residual(mu0x: &[f64], mu1x: &[f64], p: f64, means: &CondMeansAt) -> Vec<f64> {
    mu0x.iter()
        .zip(&means.mu0)
        .map(|(m, g)| (1.0 - p) * (m - g))
        .chain(mu1x.iter().zip(&means.mu1).map(|(m, g)| p * (m - g)))
        .collect()
}

/// `ξ1(x, y, p)` in the layout described in the module docs.
pub fn xi1_eval(mu0x: &[f64], mu1x: &[f64], y: f64, p: f64, means: &CondMeansAt) -> Vec<f64> {
    let v = stacked_residual(mu0x, mu1x, p, means);
    let r = y - means.y;
    let k = v.len();
    let mut out = Vec::with_capacity(k * (k + 1));
    for col in 0..k {
        for row in 0..k {
            out.push(v[row] * v[col]);
        }
    }
    out.extend(v.iter().map(|vi| vi * r));
    out
}

/// Nadaraya–Watson regression on the instruments of the central-difference
/// derivative of `ξ̂1` in `p`, taken at each training observation's fitted
/// propensity.
#[derive(Debug, Clone)]
pub struct ZetaFit {
    z: Vec<Vec<f64>>,
    xi2: Vec<Vec<f64>>,
    h: f64,
}

pub fn fit_zeta(
    train: &Dataset,
    phat_train: &[f64],
    means: &ConditionalMeans,
    bw: &Bandwidths,
    diag: &Diagnostics,
) -> Result<ZetaFit> {
    bw.validate()?;
    if train.is_empty() || phat_train.len() != train.len() {
        return Err(PrteError::Dataset("zeta fit needs one propensity per training observation".into()));
    }
    let xi2 = (0..train.len())
        .map(|j| {
            let (m0, m1, y) = (&train.mu0()[j], &train.mu1()[j], train.y()[j]);
            central_difference_vec(|q| xi1_eval(m0, m1, y, q, &means.eval(q, diag)), phat_train[j], bw.delta)
        })
        .collect();
    Ok(ZetaFit {
        z: train.z().to_vec(),
        xi2,
        h: bw.h1,
    })
}

impl ZetaFit {
    /// Builds the regression from precomputed derivative targets.
    pub fn from_targets(z: Vec<Vec<f64>>, xi2: Vec<Vec<f64>>, h: f64) -> Result<Self> {
        crate::kernel::check_bandwidth("h1", h)?;
        if z.is_empty() || z.len() != xi2.len() {
            return Err(PrteError::Dataset("zeta targets must match training instruments".into()));
        }
        Ok(Self { z, xi2, h })
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.xi2
    }

    pub fn eval(&self, z: &[f64], diag: &Diagnostics) -> Vec<f64> {
        let w: Vec<f64> = self.z.iter().map(|zj| product_kernel(zj, z, self.h)).collect();
        record(weighted_mean_vec(&w, &self.xi2), diag)
    }
}

/// `ĝ_{U|P}`: Nadaraya–Watson regression of the outcome residuals on the
/// fitted propensity, with its central-difference derivative `Δ̂_{U|P}`.
#[derive(Debug, Clone)]
pub struct ResidualMean {
    p: Vec<f64>,
    u: Vec<f64>,
    h: f64,
    delta: f64,
}

pub fn fit_g_u_given_p(phat_train: &[f64], residuals: &[f64], bw: &Bandwidths) -> Result<ResidualMean> {
    bw.validate()?;
    if phat_train.is_empty() || phat_train.len() != residuals.len() {
        return Err(PrteError::Dataset("residual regression needs one residual per propensity".into()));
    }
    Ok(ResidualMean {
        p: phat_train.to_vec(),
        u: residuals.to_vec(),
        h: bw.h2,
        delta: bw.delta,
    })
}

impl ResidualMean {
    pub fn eval(&self, p: f64, diag: &Diagnostics) -> f64 {
        let w: Vec<f64> = self.p.iter().map(|pj| kernel_h(pj - p, self.h)).collect();
        record(weighted_mean(&w, &self.u), diag)
    }

    /// `Δ̂_{U|P}(p)`. Composition with a policy is left to the caller,
    /// which applies `∂P*` itself.
    pub fn derivative(&self, p: f64, diag: &Diagnostics) -> f64 {
        central_difference(|q| self.eval(q, diag), p, self.delta)
    }
}

/// Nuisances specific to instrument-shift policies: the density ratio
/// `f̂_{Z*(Z)} / f̂_Z` and the diagonal adjustment `κ̂`.
#[derive(Debug, Clone)]
pub struct ZShiftFit {
    z: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    h: f64,
    alpha: f64,
    normalizer: f64,
}

pub fn fit_zshift_nuisances(train: &Dataset, policy: &Policy, bw: &Bandwidths, normalizer: f64) -> Result<ZShiftFit> {
    bw.validate()?;
    if !(normalizer > 0.0) {
        return Err(PrteError::Config(format!("kde normalizer must be positive, got {normalizer}")));
    }
    let zs = train
        .z()
        .iter()
        .map(|z| {
            policy
                .zstar(z)
                .ok_or_else(|| PrteError::Config("instrument-shift nuisances need a ZShift policy".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    if zs.iter().any(|v| v.len() != train.instrument_dim()) {
        return Err(PrteError::Config("shifted instruments changed dimension".into()));
    }
    let features = train
        .mu0()
        .iter()
        .zip(train.mu1())
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    Ok(ZShiftFit {
        z: train.z().to_vec(),
        zs,
        features,
        h: bw.h1,
        alpha: bw.alpha,
        normalizer,
    })
}

impl ZShiftFit {
    /// `ρ(f̂_{Z*(Z)}(z) / f̂_Z(z))`, 1 with a fallback where `f̂_Z(z) = 0`.
    pub fn density_ratio(&self, z: &[f64], diag: &Diagnostics) -> f64 {
        let num: f64 = self.zs.iter().map(|v| product_kernel(v, z, self.h)).sum::<f64>() / self.normalizer;
        let den: f64 = self.z.iter().map(|v| product_kernel(v, z, self.h)).sum::<f64>() / self.normalizer;
        if den > 0.0 {
            shrink_ratio(num / den, self.alpha)
        } else {
            diag.ratio_fallback();
            1.0
        }
    }

    /// Diagonal of `κ̂(z) = diag(ĝ_{μ|Z}(z))⁻¹ diag(ĝ_{μ|Z*(Z)}(z))`.
    /// Entries with a vanishing denominator are replaced by 1.
    pub fn kappa(&self, z: &[f64], diag: &Diagnostics) -> Vec<f64> {
        let w: Vec<f64> = self.z.iter().map(|v| product_kernel(v, z, self.h)).collect();
        let ws: Vec<f64> = self.zs.iter().map(|v| product_kernel(v, z, self.h)).collect();
        let den = record(weighted_mean_vec(&w, &self.features), diag);
        let num = record(weighted_mean_vec(&ws, &self.features), diag);
        num.iter()
            .zip(&den)
            .map(|(a, b)| {
                if b.abs() < 1e-12 {
                    diag.kappa_fallback();
                    1.0
                } else {
                    a / b
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate_sample, true_propensity, DgpParams};
    use crate::kernel::kde;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bw() -> Bandwidths {
        Bandwidths::default()
    }

    fn toy(s: Vec<f64>, z: Vec<Vec<f64>>) -> Dataset {
        let n = s.len();
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 1.0]).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        Dataset::new(y, s, x, z).unwrap()
    }

    #[test]
    fn propensity_all_treated_is_clamped() {
        let d = toy(vec![1.0; 6], (0..6).map(|i| vec![i as f64 * 0.3, 0.0]).collect());
        let diag = Diagnostics::new();
        let fit = fit_propensity(&d, &bw(), DEFAULT_PROPENSITY_CLAMP, &diag).unwrap();
        assert!(fit.loo_values().iter().all(|p| *p == 1.0 - DEFAULT_PROPENSITY_CLAMP));
        assert_eq!(fit.eval(&[0.5, 0.0], &diag), 1.0 - DEFAULT_PROPENSITY_CLAMP);
        assert!(diag.snapshot().propensity_clamps >= 7);
    }

    #[test]
    fn propensity_two_points_leave_one_out() {
        let d = toy(vec![0.0, 1.0], vec![vec![0.0, 0.0], vec![0.5, 0.5]]);
        let diag = Diagnostics::new();
        let fit = fit_propensity(&d, &bw(), 0.0, &diag).unwrap();
        assert_eq!(fit.loo_values(), &[1.0, 0.0]);
    }

    #[test]
    fn leave_one_out_ignores_own_treatment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = generate_sample(&DgpParams::default(), 60, &mut rng);
        let diag = Diagnostics::new();
        let base = fit_propensity(&d, &bw(), 0.001, &diag).unwrap();
        let mut s = d.s().to_vec();
        s[7] = 1.0 - s[7];
        let flipped = Dataset::new(d.y().to_vec(), s, d.x().to_vec(), d.z().to_vec()).unwrap();
        let other = fit_propensity(&flipped, &bw(), 0.001, &diag).unwrap();
        assert_eq!(base.loo_values()[7], other.loo_values()[7]);
        let changed = (0..60).filter(|&j| base.loo_values()[j] != other.loo_values()[j]).count();
        assert!(changed > 0);
    }

    #[test]
    fn propensity_tracks_true_score() {
        let params = DgpParams::default();
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let d = generate_sample(&params, 200, &mut rng);
            let diag = Diagnostics::new();
            let fit = fit_propensity(&d, &bw(), 0.001, &diag).unwrap();
            let mae: f64 = fit
                .loo_values()
                .iter()
                .zip(d.z())
                .map(|(p, z)| (p - true_propensity(z[0], z[1])).abs())
                .sum::<f64>()
                / 200.0;
            total += mae;
        }
        assert!(total / 20.0 < 0.15, "mean absolute error {}", total / 20.0);
    }

    #[test]
    fn density_ratio_identity_policy_is_one() {
        let ps: Vec<f64> = (1..50).map(|i| i as f64 / 50.0).collect();
        let zs = vec![vec![0.0]; ps.len()];
        let pol = Policy::proportional(0.0).unwrap();
        let ratio = fit_density_ratio(&ps, &zs, &pol, &bw(), ps.len() as f64).unwrap();
        let diag = Diagnostics::new();
        for q in [0.01, 0.3, 0.77, 0.99] {
            assert_eq!(ratio.eval(q, &diag), 1.0);
        }
        let flat = Bandwidths { alpha: 0.0, ..bw() };
        let pol = Policy::proportional(0.7).unwrap();
        let ratio = fit_density_ratio(&ps, &zs, &pol, &flat, 1.0).unwrap();
        assert_eq!(ratio.eval(0.4, &diag), 1.0);
    }

    #[test]
    fn density_ratio_out_of_support_falls_back() {
        let ps = vec![0.5, 0.52];
        let zs = vec![vec![0.0]; 2];
        let pol = Policy::proportional(0.5).unwrap();
        let ratio = fit_density_ratio(&ps, &zs, &pol, &bw(), 2.0).unwrap();
        let diag = Diagnostics::new();
        assert_eq!(ratio.eval(0.05, &diag), 1.0);
        assert_eq!(diag.snapshot().ratio_fallbacks, 1);
    }

    #[test]
    fn density_ratio_matches_analytic_shape() {
        // Fitted on true propensities so the check isolates the KDE ratio.
        // Queried inside the support of P*; at p = a the true f_P* is 0.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = generate_sample(&DgpParams::default(), 2000, &mut rng);
        let ps: Vec<f64> = d.z().iter().map(|z| true_propensity(z[0], z[1])).collect();
        let pol = Policy::proportional(0.5).unwrap();
        let ratio = fit_density_ratio(&ps, d.z(), &pol, &bw(), 2000.0).unwrap();
        let diag = Diagnostics::new();
        let (_, fp) = crate::dgp::true_fp(0.75).unwrap();
        let (_, fps) = crate::dgp::true_fpstar(0.75, 0.5);
        let analytic = (fps / fp).powf(0.25);
        let got = ratio.eval(0.75, &diag);
        assert!((got - analytic).abs() < 0.15, "got {got}, analytic {analytic}");
    }

    #[test]
    fn conditional_means() {
        let d = toy(vec![0.0, 1.0, 1.0, 0.0], (0..4).map(|i| vec![i as f64]).collect());
        let ps = vec![0.2, 0.3, 0.35, 0.8];
        let cm = fit_conditional_means(&d, &ps, &bw()).unwrap();
        let diag = Diagnostics::new();
        let at = cm.eval(0.3, &diag);
        // second feature column is constant
        assert_eq!(at.mu0[1], 1.0);
        assert_eq!(at.mu1[1], 1.0);
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, p) in ps.iter().enumerate() {
            let u: f64 = (p - 0.3) / 0.25;
            let w = if u.abs() <= 1.0 { 0.75 * (1.0 - u * u) / 0.25 } else { 0.0 };
            num += w * d.y()[j];
            den += w;
        }
        assert!((at.y - num / den).abs() < 1e-14);

        // No propensity within h2 of the query: unweighted fallback.
        let two = toy(vec![1.0, 0.0], vec![vec![0.0], vec![1.0]]);
        let cm = fit_conditional_means(&two, &[0.4, 0.45], &bw()).unwrap();
        let before = diag.snapshot().empty_neighborhood;
        assert_eq!(cm.eval(0.9, &diag).mu0, vec![0.5, 1.0]);
        assert_eq!(diag.snapshot().empty_neighborhood, before + 1);
    }

    #[test]
    fn xi1_layout() {
        let means = CondMeansAt {
            mu0: vec![1.0, 2.0],
            mu1: vec![3.0, 4.0],
            y: 0.5,
        };
        assert!(xi1_eval(&[1.0, 2.0], &[3.0, 4.0], 0.5, 0.4, &means).iter().all(|v| *v == 0.0));

        // p = 0 removes the μ1 block.
        let v = stacked_residual(&[2.0, 2.0], &[9.0, 9.0], 0.0, &means);
        assert_eq!(&v[2..], &[0.0, 0.0]);

        // v = (1, 0, 2, 0), r = 3 via p = 0.5 and doubled residuals.
        let means = CondMeansAt {
            mu0: vec![0.0, 0.0],
            mu1: vec![0.0, 0.0],
            y: 0.0,
        };
        let xi = xi1_eval(&[2.0, 0.0], &[4.0, 0.0], 3.0, 0.5, &means);
        let v = [1.0, 0.0, 2.0, 0.0];
        for col in 0..4 {
            for row in 0..4 {
                assert_eq!(xi[col * 4 + row], v[row] * v[col]);
            }
        }
        assert_eq!(&xi[16..], &[3.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn zeta_matches_two_loop_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = generate_sample(&DgpParams::default(), 50, &mut rng);
        let diag = Diagnostics::new();
        let prop = fit_propensity(&d, &bw(), 0.001, &diag).unwrap();
        let ps = prop.loo_values().to_vec();
        let cm = fit_conditional_means(&d, &ps, &bw()).unwrap();
        let zeta = fit_zeta(&d, &ps, &cm, &bw(), &diag).unwrap();
        let query = [-0.5, 1.2];

        // Independent recomputation: explicit loops, no shared helpers.
        let k = |u: f64, h: f64| {
            let t = u / h;
            if t.abs() <= 1.0 { 0.75 * (1.0 - t * t) / h } else { 0.0 }
        };
        let cond = |p: f64| {
            let mut num = [0.0; 5];
            let mut den = 0.0;
            for j in 0..50 {
                let w = k(ps[j] - p, 0.25);
                num[0] += w * d.x()[j][0];
                num[1] += w * d.x()[j][1];
                num[4] += w * d.y()[j];
                den += w;
            }
            [num[0] / den, num[1] / den, num[4] / den]
        };
        let xi = |j: usize, p: f64| {
            let g = cond(p);
            let x = &d.x()[j];
            let v = [
                (1.0 - p) * (x[0] - g[0]),
                (1.0 - p) * (x[1] - g[1]),
                p * (x[0] - g[0]),
                p * (x[1] - g[1]),
            ];
            let r = d.y()[j] - g[2];
            let mut out = vec![];
            for c in 0..4 {
                for rr in 0..4 {
                    out.push(v[rr] * v[c]);
                }
            }
            for vi in v {
                out.push(vi * r);
            }
            out
        };
        let mut num = [0.0; 20];
        let mut den = 0.0;
        for j in 0..50 {
            let w = k(d.z()[j][0] - query[0], 2.5) * k(d.z()[j][1] - query[1], 2.5);
            let hi = xi(j, ps[j] + 0.01);
            let lo = xi(j, ps[j] - 0.01);
            for c in 0..20 {
                num[c] += w * (hi[c] - lo[c]) / 0.02;
            }
            den += w;
        }
        let got = zeta.eval(&query, &diag);
        for c in 0..20 {
            assert!((got[c] - num[c] / den).abs() < 1e-12 * (1.0 + got[c].abs()), "component {c}");
        }
    }

    #[test]
    fn zeta_of_p_free_and_linear_targets() {
        let z: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let diag = Diagnostics::new();
        let zero = ZetaFit::from_targets(z.clone(), vec![vec![0.0; 3]; 5], 2.5).unwrap();
        assert_eq!(zero.eval(&[1.3], &diag), vec![0.0; 3]);
        let slope = vec![1.5, -2.0, 0.25];
        let lin = ZetaFit::from_targets(z, vec![slope.clone(); 5], 2.5).unwrap();
        let got = lin.eval(&[2.2], &diag);
        for (a, b) in got.iter().zip(&slope) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_mean_constant_cases() {
        let ps: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let diag = Diagnostics::new();
        let zero = fit_g_u_given_p(&ps, &vec![0.0; ps.len()], &bw()).unwrap();
        assert_eq!(zero.eval(0.4, &diag), 0.0);
        assert_eq!(zero.derivative(0.4, &diag), 0.0);
        let c = fit_g_u_given_p(&ps, &vec![1.7; ps.len()], &bw()).unwrap();
        assert!((c.eval(0.6, &diag) - 1.7).abs() < 1e-14);
        assert!(c.derivative(0.6, &diag).abs() < 1e-10);
    }

    #[test]
    fn residual_mean_recovers_dgp_curve() {
        let params = DgpParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = generate_sample(&params, 4000, &mut rng);
        let diag = Diagnostics::new();
        let prop = fit_propensity(&d, &bw(), 0.001, &diag).unwrap();
        let (b0, b1) = params.outcome_slopes();
        let u: Vec<f64> = (0..d.len())
            .map(|i| crate::score::residual_u(d.y()[i], d.s()[i], &d.mu0()[i], &d.mu1()[i], &b0, &b1))
            .collect();
        let fit = fit_g_u_given_p(prop.loo_values(), &u, &bw()).unwrap();
        let g = fit.eval(0.5, &diag);
        assert!((g - params.g_u_given_p(0.5).unwrap()).abs() < 0.01, "g(0.5) = {g}");
        let dd = fit.derivative(0.3, &diag);
        let truth = params.delta_u_given_p(0.3).unwrap();
        assert!((dd - truth).abs() < 0.03, "Δ(0.3) = {dd}, truth {truth}");
    }

    #[test]
    fn zshift_identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = generate_sample(&DgpParams::default(), 100, &mut rng);
        let pol = Policy::zshift(|z: &[f64]| z.to_vec());
        let fit = fit_zshift_nuisances(&d, &pol, &bw(), 100.0).unwrap();
        let diag = Diagnostics::new();
        for z in d.z().iter().take(10) {
            assert_eq!(fit.density_ratio(z, &diag), 1.0);
            assert!(fit.kappa(z, &diag).iter().all(|k| *k == 1.0));
        }
    }

    #[test]
    fn zshift_constant_features_give_identity_kappa() {
        let z: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1 - 1.5]).collect();
        let x = vec![vec![2.0]; 30];
        let d = Dataset::new(vec![0.0; 30], vec![0.0; 30], x, z).unwrap();
        let fit = fit_zshift_nuisances(&d, &Policy::z_translation(0.4), &bw(), 30.0).unwrap();
        let diag = Diagnostics::new();
        let k = fit.kappa(&[0.0], &diag);
        assert!(k.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn zshift_translation_density_ratio() {
        let params = DgpParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = generate_sample(&params, 4000, &mut rng);
        let c = 1.0;
        let fit = fit_zshift_nuisances(&d, &Policy::z_translation(c), &bw(), 4000.0).unwrap();
        let diag = Diagnostics::new();
        // Z1 ~ N(-1, 9), Z2 ~ N(1, 9) independent; Z* = Z + c.
        let dens = |z: &[f64], shift: f64| {
            crate::special::norm_pdf((z[0] - shift + 1.0) / 3.0) / 3.0
                * crate::special::norm_pdf((z[1] - shift - 1.0) / 3.0)
                / 3.0
        };
        let z = [-1.0, 1.0];
        let analytic = (dens(&z, c) / dens(&z, 0.0)).powf(0.25);
        let got = fit.density_ratio(&z, &diag);
        assert!((got - analytic).abs() < 0.2, "got {got}, analytic {analytic}");
    }

    #[test]
    fn fitted_functions_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = generate_sample(&DgpParams::default(), 80, &mut rng);
        let diag = Diagnostics::new();
        let prop = fit_propensity(&d, &bw(), 0.001, &diag).unwrap();
        let q = [0.3, -0.7];
        assert_eq!(prop.eval(&q, &diag).to_bits(), prop.eval(&q, &diag).to_bits());
        let cm = fit_conditional_means(&d, prop.loo_values(), &bw()).unwrap();
        assert_eq!(cm.eval(0.41, &diag), cm.eval(0.41, &diag));
        let _ = kde(prop.loo_values(), 0.4, 0.25, 80.0).unwrap();
    }
}
