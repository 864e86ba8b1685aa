//! Cross-fitted estimation.
//!
//! Pass 1 fits the propensity, the conditional means, `ζ̂` and the density
//! ratio on each fold complement and solves for `θ̂1`, `θ̂2` and
//! `β̂ = d(θ̂1)`. Pass 2 forms the residuals `𝒰(β̂)`, fits `ĝ_{U|P}` on each
//! complement and solves for `θ̂3`. Each moment is affine in θ, so the
//! cross-fit estimating equation is solved in closed form by fold means.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diagnostics::{DiagnosticCounts, Diagnostics};
use crate::error::{PrteError, Result};
use crate::kernel::Bandwidths;
use crate::nuisance::{
    fit_conditional_means, fit_density_ratio, fit_g_u_given_p, fit_propensity, fit_zeta, fit_zshift_nuisances,
    xi1_eval, DEFAULT_PROPENSITY_CLAMP,
};
use crate::policy::Policy;
use crate::score::{
    lambda_gradient, lambda_map, m_hat_matrix, residual_u, sandwich_variance, score_decomposed, Decomposed,
    ScoreInputs, ScoreRow, ShiftInputs, ThetaEstimate,
};

/// Sup-norm bound on the estimating-equation residual at `θ̂`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Standard normal 0.975 quantile.
pub const Z_95: f64 = 1.959964;

/// A random partition of `0..n` into near-equal folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: Vec<Vec<usize>>,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    /// Indices outside fold `l`, ascending.
    pub fn complement(&self, l: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != l).collect()
    }
}

/// Shuffles `0..n` and deals it into `folds` groups; the first `n % folds`
/// groups get one extra element. Each fold's indices are sorted.
pub fn make_folds<R: rand::Rng + ?Sized>(n: usize, folds: usize, rng: &mut R) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(PrteError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if n < 2 * folds {
        return Err(PrteError::InsufficientSample {
            n,
            folds,
            needed: 2 * folds,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut assignment = vec![0; n];
    let mut start = 0;
    for l in 0..folds {
        let size = base + usize::from(l < extra);
        let mut fold = perm[start..start + size].to_vec();
        fold.sort_unstable();
        for &i in &fold {
            assignment[i] = l;
        }
        out.push(fold);
        start += size;
    }
    Ok(FoldPlan {
        folds: out,
        assignment,
    })
}

#[derive(Debug, Clone)]
pub struct EstimationConfig {
    pub folds: usize,
    pub bw: Bandwidths,
    pub policy: Policy,
    /// Seed of the fold partition.
    pub seed: u64,
    pub z_quantile: f64,
    pub propensity_clamp: f64,
}

impl EstimationConfig {
    pub fn new(policy: Policy) -> Self {
        Self {
            folds: 5,
            bw: Bandwidths::default(),
            policy,
            seed: 0,
            z_quantile: Z_95,
            propensity_clamp: DEFAULT_PROPENSITY_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bw.validate()?;
        if self.folds < 2 {
            return Err(PrteError::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.z_quantile.is_finite() && self.z_quantile > 0.0) {
            return Err(PrteError::Config(format!("z quantile must be positive, got {}", self.z_quantile)));
        }
        if let Policy::ProportionalShift { a } = self.policy {
            Policy::proportional(a)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub prte_hat: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    #[serde(flatten)]
    pub theta: ThetaEstimate,
    pub n: usize,
    pub folds: usize,
    pub diagnostics: DiagnosticCounts,
}

/// Nuisance values of one held-out observation that do not depend on `β̂`.
#[derive(Debug, Clone)]
struct HeldOut {
    index: usize,
    p_hat: f64,
    xi1: Vec<f64>,
    zeta: Vec<f64>,
    ratio: f64,
    shift: ShiftPoint,
}

#[derive(Debug, Clone)]
enum ShiftPoint {
    Propensity { pstar: f64, dpstar: f64 },
    Instrument { p_at_zstar: f64, kappa: Vec<f64> },
}

/// Pass-1 output for one fold: the training complement and its
/// leave-one-out propensities, plus the held-out evaluations.
#[derive(Debug, Clone)]
struct FoldPass1 {
    fold: usize,
    train: Vec<usize>,
    phat_train: Vec<f64>,
    held: Vec<HeldOut>,
}

/// Everything produced by the two passes.
#[derive(Debug, Clone)]
pub struct CrossFitted {
    plan: FoldPlan,
    /// Per observation, in data order.
    inputs: Vec<ScoreInputs>,
    decomposed: Vec<Decomposed>,
    theta: ThetaEstimate,
    diagnostics: DiagnosticCounts,
}

fn pass1_fold(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    config: &EstimationConfig,
    diag: &Diagnostics,
) -> Result<FoldPass1> {
    let train_idx = plan.complement(fold);
    let train = data.subset(&train_idx);
    let bw = &config.bw;
    let prop = fit_propensity(&train, bw, config.propensity_clamp, diag)?;
    let phat_train = prop.loo_values().to_vec();
    let means = fit_conditional_means(&train, &phat_train, bw)?;
    let zeta = fit_zeta(&train, &phat_train, &means, bw, diag)?;
    let normalizer = train.len() as f64;

    enum ShiftFit {
        P(crate::nuisance::DensityRatio),
        Z(crate::nuisance::ZShiftFit),
    }
    let shift_fit = if config.policy.is_zshift() {
        ShiftFit::Z(fit_zshift_nuisances(&train, &config.policy, bw, normalizer)?)
    } else {
        ShiftFit::P(fit_density_ratio(&phat_train, train.z(), &config.policy, bw, normalizer)?)
    };

    let mut held = Vec::with_capacity(plan.folds()[fold].len());
    for &i in &plan.folds()[fold] {
        debug_assert_eq!(plan.fold_of(i), fold);
        let z = &data.z()[i];
        let p_hat = prop.eval(z, diag);
        let at = means.eval(p_hat, diag);
        let xi1 = xi1_eval(&data.mu0()[i], &data.mu1()[i], data.y()[i], p_hat, &at);
        let (ratio, shift) = match &shift_fit {
            ShiftFit::P(dr) => {
                let pstar = config.policy.pstar(p_hat, z).expect("propensity policy");
                let dpstar = config.policy.dpstar(p_hat, z).expect("propensity policy");
                (dr.eval(p_hat, diag), ShiftPoint::Propensity { pstar, dpstar })
            }
            ShiftFit::Z(zf) => {
                let zs = config.policy.zstar(z).expect("instrument policy");
                let p_at_zstar = prop.eval(&zs, diag);
                (
                    zf.density_ratio(z, diag),
                    ShiftPoint::Instrument {
                        p_at_zstar,
                        kappa: zf.kappa(z, diag),
                    },
                )
            }
        };
        held.push(HeldOut {
            index: i,
            p_hat,
            xi1,
            zeta: zeta.eval(z, diag),
            ratio,
            shift,
        });
    }
    Ok(FoldPass1 {
        fold,
        train: train_idx,
        phat_train,
        held,
    })
}

/// Pass 2 for one fold: fits `ĝ_{U|P}` on the complement residuals and
/// completes the score inputs of the held-out observations.
fn pass2_fold(data: &Dataset, f: &FoldPass1, residuals: &[f64], bw: &Bandwidths, diag: &Diagnostics) -> Result<Vec<ScoreInputs>> {
    let u_train: Vec<f64> = f.train.iter().map(|&j| residuals[j]).collect();
    let g = fit_g_u_given_p(&f.phat_train, &u_train, bw)?;
    Ok(f.held
        .iter()
        .map(|h| {
            let i = h.index;
            let shift = match &h.shift {
                ShiftPoint::Propensity { pstar, dpstar } => ShiftInputs::Propensity {
                    pstar: *pstar,
                    dpstar: *dpstar,
                    g_u_at_pstar: g.eval(*pstar, diag),
                    delta_u_at_pstar: g.derivative(*pstar, diag),
                    delta_u_at_p: g.derivative(h.p_hat, diag),
                },
                ShiftPoint::Instrument { p_at_zstar, kappa } => ShiftInputs::Instrument {
                    p_at_zstar: *p_at_zstar,
                    kappa: kappa.clone(),
                    g_u_at_p_zstar: g.eval(*p_at_zstar, diag),
                },
            };
            ScoreInputs {
                y: data.y()[i],
                s: data.s()[i],
                mu0: data.mu0()[i].clone(),
                mu1: data.mu1()[i].clone(),
                p_hat: h.p_hat,
                xi1: h.xi1.clone(),
                zeta: h.zeta.clone(),
                ratio: h.ratio,
                g_u_at_p: g.eval(h.p_hat, diag),
                shift,
            }
        })
        .collect())
}

/// `(1/L) Σ_ℓ (1/|I_ℓ|) Σ_{i∈I_ℓ} f(i)`, summed in index order.
fn cross_fit_mean<F>(plan: &FoldPlan, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<f64>,
{
    let mut total = vec![0.0; dim];
    for fold in plan.folds() {
        let mut acc = vec![0.0; dim];
        for &i in fold {
            for (a, v) in acc.iter_mut().zip(f(i)) {
                *a += v;
            }
        }
        for (t, a) in total.iter_mut().zip(&acc) {
            *t += a / fold.len() as f64;
        }
    }
    let l = plan.num_folds() as f64;
    total.iter_mut().for_each(|t| *t /= l);
    total
}

impl CrossFitted {
    /// Runs both passes and solves the estimating equation.
    pub fn fit(data: &Dataset, config: &EstimationConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let plan = make_folds(data.len(), config.folds, &mut rng)?;
        let diag = Diagnostics::new();

        let pass1: Vec<FoldPass1> = (0..plan.num_folds())
            .into_par_iter()
            .map(|l| pass1_fold(data, &plan, l, config, &diag))
            .collect::<Result<_>>()?;

        let mut slot: Vec<Option<&HeldOut>> = vec![None; data.len()];
        for f in &pass1 {
            for h in &f.held {
                assert_eq!(plan.fold_of(h.index), f.fold, "held-out observation evaluated by a foreign fold");
                assert!(f.train.binary_search(&h.index).is_err(), "held-out observation in its own training set");
                slot[h.index] = Some(h);
            }
        }
        let held: Vec<&HeldOut> = slot.into_iter().map(|h| h.expect("every observation held out once")).collect();

        let p = data.feature_dim();
        let k = 2 * p;
        let stacked = |i: usize| -> Vec<f64> { data.mu0()[i].iter().chain(&data.mu1()[i]).copied().collect() };
        let theta1 = cross_fit_mean(&plan, k * (k + 1), |i| {
            let h = held[i];
            let e = data.s()[i] - h.p_hat;
            h.xi1.iter().zip(&h.zeta).map(|(x, z)| x + z * e).collect()
        });
        let theta2 = cross_fit_mean(&plan, k, |i| {
            let h = held[i];
            let e = data.s()[i] - h.p_hat;
            match &h.shift {
                ShiftPoint::Propensity { pstar, dpstar } => {
                    stacked(i).iter().map(|m| m * (pstar - h.p_hat) + m * (dpstar - 1.0) * e).collect()
                }
                ShiftPoint::Instrument { p_at_zstar, kappa } => stacked(i)
                    .iter()
                    .zip(kappa)
                    .map(|(m, kk)| m * (p_at_zstar - h.p_hat) + (kk * h.ratio - 1.0) * m * e)
                    .collect(),
            }
        });
        let provisional = ThetaEstimate::from_moments(theta1, theta2, 0.0)?;

        let residuals: Vec<f64> = (0..data.len())
            .map(|i| {
                residual_u(
                    data.y()[i],
                    data.s()[i],
                    &data.mu0()[i],
                    &data.mu1()[i],
                    &provisional.beta0,
                    &provisional.beta1,
                )
            })
            .collect();

        let pass2: Vec<Vec<ScoreInputs>> = pass1
            .par_iter()
            .map(|f| pass2_fold(data, f, &residuals, &config.bw, &diag))
            .collect::<Result<_>>()?;
        let mut inputs: Vec<Option<ScoreInputs>> = vec![None; data.len()];
        for (f, rows) in pass1.iter().zip(pass2) {
            for (h, w) in f.held.iter().zip(rows) {
                inputs[h.index] = Some(w);
            }
        }
        let inputs: Vec<ScoreInputs> = inputs.into_iter().map(|w| w.expect("pass 2 covers every fold")).collect();
        let decomposed: Vec<Decomposed> = inputs.iter().map(score_decomposed).collect();

        let beta = provisional.beta();
        let theta3 = cross_fit_mean(&plan, 1, |i| {
            let d = &decomposed[i];
            vec![d.m31 - d.m32.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()]
        })[0];
        let theta = ThetaEstimate {
            theta3,
            ..provisional
        };
        if theta.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(PrteError::Numerical("non-finite moment estimate".into()));
        }

        Ok(Self {
            plan,
            inputs,
            decomposed,
            theta,
            diagnostics: diag.snapshot(),
        })
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn theta(&self) -> &ThetaEstimate {
        &self.theta
    }

    pub fn inputs(&self) -> &[ScoreInputs] {
        &self.inputs
    }

    pub fn decomposed(&self) -> &[Decomposed] {
        &self.decomposed
    }

    pub fn diagnostics(&self) -> DiagnosticCounts {
        self.diagnostics
    }

    /// Score rows at `theta`, in data order.
    pub fn rows(&self, theta: &ThetaEstimate) -> Vec<ScoreRow> {
        self.decomposed.iter().map(|d| d.assemble(theta)).collect()
    }

    /// Cross-fit mean score `(1/L) Σ_ℓ mean_{i∈I_ℓ} m(W_i; θ, γ̂_ℓ)`.
    pub fn residual(&self, theta: &ThetaEstimate) -> Vec<f64> {
        let rows = self.rows(theta);
        let dim = rows[0].len();
        cross_fit_mean(&self.plan, dim, |i| rows[i].to_flat())
    }

    /// Point estimate, sandwich standard error and confidence interval.
    pub fn finish(&self, z_quantile: f64, step: f64) -> Result<EstimateResult> {
        let resid = self.residual(&self.theta);
        let sup = resid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(sup <= RESIDUAL_TOLERANCE) {
            return Err(PrteError::Numerical(format!(
                "estimating equation residual {sup:e} exceeds {RESIDUAL_TOLERANCE:e}"
            )));
        }
        let n = self.inputs.len();
        let k = self.theta.beta0.len() * 2;
        let mut mean_m32 = vec![0.0; k];
        for d in &self.decomposed {
            for (a, v) in mean_m32.iter_mut().zip(&d.m32) {
                *a += v;
            }
        }
        mean_m32.iter_mut().for_each(|a| *a /= n as f64);
        let m_hat = m_hat_matrix(&mean_m32, &self.theta.theta1, step)?;
        let grad = lambda_gradient(&self.theta, step)?;
        let sw = sandwich_variance(&self.rows(&self.theta), &m_hat, &grad)?;
        let prte_hat = lambda_map(&self.theta);
        let se = (sw.var_prte / n as f64).sqrt();
        if !prte_hat.is_finite() || !se.is_finite() {
            return Err(PrteError::Numerical("non-finite estimate or standard error".into()));
        }
        Ok(EstimateResult {
            prte_hat,
            se,
            ci_lo: prte_hat - z_quantile * se,
            ci_hi: prte_hat + z_quantile * se,
            theta: self.theta.clone(),
            n,
            folds: self.plan.num_folds(),
            diagnostics: self.diagnostics,
        })
    }
}

/// Cross-fitted PRTE estimate with its standard error.
pub fn estimate(data: &Dataset, config: &EstimationConfig) -> Result<EstimateResult> {
    CrossFitted::fit(data, config)?.finish(config.z_quantile, config.bw.delta)
}

/// Cross-fit mean score at `theta` with the nuisances fitted under `config`.
pub fn estimating_equation_residual(data: &Dataset, config: &EstimationConfig, theta: &ThetaEstimate) -> Result<Vec<f64>> {
    Ok(CrossFitted::fit(data, config)?.residual(theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate_sample, DgpParams};
    use approx::assert_abs_diff_eq;

    fn sample(n: usize, seed: u64) -> Dataset {
        generate_sample(&DgpParams::default(), n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn fold_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = make_folds(10, 5, &mut rng).unwrap();
        assert!(plan.folds().iter().all(|f| f.len() == 2));
        let plan = make_folds(11, 5, &mut rng).unwrap();
        let mut sizes: Vec<usize> = plan.folds().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        let mut all: Vec<usize> = plan.folds().concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(matches!(
            make_folds(9, 5, &mut rng),
            Err(PrteError::InsufficientSample { needed: 10, .. })
        ));
    }

    #[test]
    fn folds_are_deterministic() {
        let a = make_folds(37, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_folds(37, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for l in 0..4 {
            assert!(a.complement(l).iter().all(|&i| a.fold_of(i) != l));
        }
    }

    #[test]
    fn identity_policy() {
        let d = sample(300, 2);
        let config = EstimationConfig::new(Policy::proportional(0.0).unwrap());
        let cf = CrossFitted::fit(&d, &config).unwrap();
        assert!(cf.theta().theta2.iter().all(|v| *v == 0.0));
        assert!(cf.decomposed().iter().all(|r| r.m32.iter().all(|v| *v == 0.0)));
        let res = cf.finish(Z_95, 0.01).unwrap();
        assert!(res.ci_lo <= res.prte_hat && res.prte_hat <= res.ci_hi);
    }

    #[test]
    fn residual_vanishes_at_solution_and_is_affine() {
        let d = sample(250, 3);
        let config = EstimationConfig::new(Policy::proportional(0.5).unwrap());
        let cf = CrossFitted::fit(&d, &config).unwrap();
        let theta = cf.theta().clone();
        let r0 = cf.residual(&theta);
        assert!(r0.iter().all(|v| v.abs() <= RESIDUAL_TOLERANCE));

        let bumped = ThetaEstimate {
            theta3: theta.theta3 + 0.3,
            ..theta.clone()
        };
        let r = cf.residual(&bumped);
        assert_abs_diff_eq!(*r.last().unwrap(), -0.3, epsilon = 1e-12);

        // Unit bump of θ1[k]: k-th entry −1, m3 moves by −mean(m32)'(d(θ1+e_k) − d(θ1)).
        let k = 17;
        let mut flat = theta.to_flat();
        flat[k] += 1.0;
        let moved = ThetaEstimate::from_flat(2, &flat).unwrap();
        let r = cf.residual(&moved);
        assert_abs_diff_eq!(r[k], -1.0, epsilon = 1e-12);
        let db: Vec<f64> = moved.beta().iter().zip(theta.beta()).map(|(a, b)| a - b).collect();
        let m32_mean = cross_fit_mean(cf.plan(), 4, |i| cf.decomposed()[i].m32.clone());
        let expect: f64 = -m32_mean.iter().zip(&db).map(|(a, b)| a * b).sum::<f64>();
        assert_abs_diff_eq!(*r.last().unwrap(), expect, epsilon = 1e-10);
    }

    #[test]
    fn deterministic() {
        let d = sample(200, 4);
        let config = EstimationConfig {
            seed: 11,
            ..EstimationConfig::new(Policy::proportional(0.5).unwrap())
        };
        let a = estimate(&d, &config).unwrap();
        let b = estimate(&d, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prte_hat.to_bits(), b.prte_hat.to_bits());
    }

    #[test]
    fn single_run_near_truth() {
        let d = sample(500, 5);
        let config = EstimationConfig::new(Policy::proportional(0.5).unwrap());
        let res = estimate(&d, &config).unwrap();
        assert!(res.se > 0.0);
        assert!((res.prte_hat - 0.055).abs() <= 3.0 * res.se, "{} ± {}", res.prte_hat, res.se);
    }

    #[test]
    fn small_sample_rejected() {
        let d = sample(9, 6);
        let config = EstimationConfig::new(Policy::proportional(0.5).unwrap());
        assert!(matches!(estimate(&d, &config), Err(PrteError::InsufficientSample { .. })));
    }

    #[test]
    fn constant_covariates_are_not_identified() {
        let d = sample(100, 7);
        let flat = Dataset::new(d.y().to_vec(), d.s().to_vec(), vec![vec![1.0, 2.0]; 100], d.z().to_vec()).unwrap();
        let config = EstimationConfig::new(Policy::proportional(0.5).unwrap());
        assert!(matches!(estimate(&flat, &config), Err(PrteError::Identification(_))));
    }

    #[test]
    fn zshift_identity_is_exactly_null() {
        let d = sample(200, 8);
        let config = EstimationConfig::new(Policy::zshift(|z: &[f64]| z.to_vec()));
        let res = estimate(&d, &config).unwrap();
        assert_abs_diff_eq!(res.prte_hat, 0.0, epsilon = 1e-12);
        assert!(res.theta.theta2.iter().all(|v| v.abs() < 1e-12));
    }
}
