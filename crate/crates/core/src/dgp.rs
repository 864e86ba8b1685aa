//! Simulation design and its closed-form ground truths.
//!
//! The outcome residual `U = Y − (1−S)μ0(X)'β0 − S μ1(X)'β1` is built from
//! slope coefficients only, so the outcome intercepts stay inside `U`. The
//! functions [`DgpParams::g_u_given_p`] and [`DgpParams::delta_u_given_p`]
//! include them; the `selection_*` variants return the part driven by the
//! unobservables alone.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{PrteError, Result};
use crate::nuisance::CondMeansAt;
use crate::special::{integrate, norm_cdf, norm_pdf, norm_quantile};

/// Absolute tolerance of the PRTE quadratures.
pub const PRTE_TOLERANCE: f64 = 1e-6;

/// `Y_d = intercept + slopes' (x1, x2) + U_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEquation {
    pub intercept: f64,
    pub slopes: [f64; 2],
}

/// Coefficients of the simulation design. Error terms load on three
/// independent standard normals `(ε1, ε2, ε3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub treated: OutcomeEquation,
    pub untreated: OutcomeEquation,
    /// `(γ0, γ1, γ2)` in `S = 1{γ0 + γ1 z1 + γ2 z2 − U_S > 0}`.
    pub selection: [f64; 3],
    pub u1_loadings: [f64; 3],
    pub u0_loadings: [f64; 3],
    pub us_loadings: [f64; 3],
    pub x_means: [f64; 2],
    pub x_vars: [f64; 2],
    pub z_means: [f64; 2],
    pub z_vars: [f64; 2],
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            treated: OutcomeEquation {
                intercept: 0.24,
                slopes: [0.8, 0.4],
            },
            untreated: OutcomeEquation {
                intercept: 0.02,
                slopes: [0.5, 0.1],
            },
            selection: [0.2, 0.3, 0.1],
            u1_loadings: [0.012, 0.01, 0.0],
            u0_loadings: [-0.05, 0.0, 0.02],
            us_loadings: [-1.0, 0.0, 0.0],
            x_means: [-2.0, 2.0],
            x_vars: [4.0, 4.0],
            z_means: [-1.0, 1.0],
            z_vars: [9.0, 9.0],
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn open_unit(what: &'static str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(PrteError::Domain { what, value: p })
    }
}

/// Latent draw of one unit: covariates, instruments and the three errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentDraw {
    pub x: [f64; 2],
    pub z: [f64; 2],
    pub u0: f64,
    pub u1: f64,
    pub us: f64,
}

impl DgpParams {
    /// Outcome errors switched off; selection stays random.
    pub fn without_outcome_noise(mut self) -> Self {
        self.u0_loadings = [0.0; 3];
        self.u1_loadings = [0.0; 3];
        self
    }

    /// `(β0, β1)` for the features `μ0 = μ1 = (x1, x2)`.
    pub fn outcome_slopes(&self) -> (Vec<f64>, Vec<f64>) {
        (self.untreated.slopes.to_vec(), self.treated.slopes.to_vec())
    }

    pub fn selection_index(&self, z: &[f64]) -> f64 {
        self.selection[0] + self.selection[1] * z[0] + self.selection[2] * z[1]
    }

    /// Standard deviation of `U_S`.
    pub fn selection_sd(&self) -> f64 {
        dot3(&self.us_loadings, &self.us_loadings).sqrt()
    }

    /// Mean and standard deviation of the selection index `μ_S(Z)`.
    pub fn index_moments(&self) -> (f64, f64) {
        let [g0, g1, g2] = self.selection;
        let mean = g0 + g1 * self.z_means[0] + g2 * self.z_means[1];
        let var = g1 * g1 * self.z_vars[0] + g2 * g2 * self.z_vars[1];
        (mean, var.sqrt())
    }

    fn check_selection(&self) -> Result<f64> {
        let sd = self.selection_sd();
        let (_, isd) = self.index_moments();
        if sd > 0.0 && isd > 0.0 {
            Ok(sd)
        } else {
            Err(PrteError::Config("selection needs a random index and unobservable".into()))
        }
    }

    /// `Pr(S = 1 | Z = z)`.
    pub fn propensity(&self, z: &[f64]) -> f64 {
        norm_cdf(self.selection_index(z) / self.selection_sd())
    }

    /// `(F_P(p), f_P(p))`.
    pub fn fp(&self, p: f64) -> Result<(f64, f64)> {
        open_unit("propensity distribution", p)?;
        let s = self.check_selection()?;
        let (m, sd) = self.index_moments();
        let t = norm_quantile(p);
        let arg = (s * t - m) / sd;
        Ok((norm_cdf(arg), norm_pdf(arg) * (s / sd) / norm_pdf(t)))
    }

    /// `(F_{P*}(p), f_{P*}(p))` for `P* = P + a(1 − P)`.
    pub fn fpstar(&self, p: f64, a: f64) -> Result<(f64, f64)> {
        if !(0.0..1.0).contains(&a) {
            return Err(PrteError::Domain {
                what: "policy intensity",
                value: a,
            });
        }
        let q = (p - a) / (1.0 - a);
        if q <= 0.0 {
            Ok((0.0, 0.0))
        } else if q >= 1.0 {
            Ok((1.0, 0.0))
        } else {
            let (cdf, pdf) = self.fp(q)?;
            Ok((cdf, pdf / (1.0 - a)))
        }
    }

    /// `E[Y1 − Y0 | X = x, U_P = p]` with `U_P = Φ(U_S / σ_S)`.
    pub fn mte(&self, x: &[f64], p: f64) -> Result<f64> {
        let (t, u) = (self.treated.slopes, self.untreated.slopes);
        let covariate = t[0] * x[0] + t[1] * x[1] - u[0] * x[0] - u[1] * x[1];
        Ok(covariate + self.delta_u_given_p(p)?)
    }

    fn selection_loading(&self) -> Result<f64> {
        let s = self.check_selection()?;
        let c0 = dot3(&self.u0_loadings, &self.us_loadings);
        let c1 = dot3(&self.u1_loadings, &self.us_loadings);
        Ok((c0 - c1) / s)
    }

    /// Selection part of `E[U | P = p]`: `k φ(Φ⁻¹(p))`.
    pub fn selection_g_u_given_p(&self, p: f64) -> Result<f64> {
        open_unit("g_U|P", p)?;
        Ok(self.selection_loading()? * norm_pdf(norm_quantile(1.0 - p)))
    }

    /// Derivative of [`Self::selection_g_u_given_p`]: `k Φ⁻¹(1 − p)`.
    pub fn selection_delta_u_given_p(&self, p: f64) -> Result<f64> {
        open_unit("Δ_U|P", p)?;
        Ok(self.selection_loading()? * norm_quantile(1.0 - p))
    }

    fn intercept_gap(&self) -> f64 {
        self.treated.intercept - self.untreated.intercept
    }

    /// `E[U | P = p]`, intercepts included.
    pub fn g_u_given_p(&self, p: f64) -> Result<f64> {
        Ok(self.untreated.intercept + self.intercept_gap() * p + self.selection_g_u_given_p(p)?)
    }

    /// `d/dp E[U | P = p]`.
    pub fn delta_u_given_p(&self, p: f64) -> Result<f64> {
        Ok(self.intercept_gap() + self.selection_delta_u_given_p(p)?)
    }

    /// `E[U | P = Φ(t)]` written in the index `t`, finite for every `t`.
    fn g_u_at_index(&self, t: f64) -> Result<f64> {
        Ok(self.untreated.intercept + self.intercept_gap() * norm_cdf(t) + self.selection_loading()? * norm_pdf(t))
    }

    fn covariate_gap_mean(&self) -> f64 {
        (self.treated.slopes[0] - self.untreated.slopes[0]) * self.x_means[0]
            + (self.treated.slopes[1] - self.untreated.slopes[1]) * self.x_means[1]
    }

    /// True PRTE of the proportional shift `P* = P + a(1 − P)`:
    /// `E[μ'(β1−β0)] a(1 − E[P]) + ∫ Δ(p) (F_P(p) − F_{P*}(p)) dp`.
    pub fn prte(&self, a: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&a) {
            return Err(PrteError::Domain {
                what: "policy intensity",
                value: a,
            });
        }
        if a == 0.0 {
            return Ok(0.0);
        }
        let integrand = |p: f64| -> f64 {
            let delta = self.delta_u_given_p(p).unwrap_or(f64::NAN);
            let fp = self.fp(p).map(|v| v.0).unwrap_or(f64::NAN);
            let fps = self.fpstar(p, a).map(|v| v.0).unwrap_or(f64::NAN);
            delta * (fp - fps)
        };
        let lower = integrate(integrand, 0.0, a, PRTE_TOLERANCE / 2.0)?;
        let upper = integrate(integrand, a, 1.0, PRTE_TOLERANCE / 2.0)?;
        let (m, sd) = self.index_moments();
        let mean_p = norm_cdf(m / (self.selection_sd().powi(2) + sd * sd).sqrt());
        Ok(self.covariate_gap_mean() * a * (1.0 - mean_p) + lower.value + upper.value)
    }

    /// True effect of translating both instruments by `c`.
    pub fn prte_z_translation(&self, c: f64) -> Result<f64> {
        let s = self.check_selection()?;
        let (m, sd) = self.index_moments();
        let shift = c * (self.selection[1] + self.selection[2]);
        if shift == 0.0 {
            return Ok(0.0);
        }
        let gap = self.covariate_gap_mean();
        // Expectation over the index μ_S = m + sd·u, u ~ N(0, 1).
        let integrand = |u: f64| -> f64 {
            let t0 = (m + sd * u) / s;
            let t1 = (m + sd * u + shift) / s;
            let g = self.g_u_at_index(t1).unwrap_or(f64::NAN) - self.g_u_at_index(t0).unwrap_or(f64::NAN);
            norm_pdf(u) * (gap * (norm_cdf(t1) - norm_cdf(t0)) + g)
        };
        Ok(integrate(integrand, -12.0, 12.0, PRTE_TOLERANCE)?.value)
    }

    /// Density ratio `f_{P*}(p) / f_P(p)` for the proportional shift.
    pub fn density_ratio(&self, p: f64, a: f64) -> Result<f64> {
        let (_, f) = self.fp(p)?;
        let (_, fs) = self.fpstar(p, a)?;
        Ok(if f > 0.0 { fs / f } else { 0.0 })
    }

    /// `(E[μ0(X) | P], E[μ1(X) | P], E[Y | P = p])`; the feature means are
    /// constant because `X` is independent of `Z`.
    pub fn conditional_means(&self, p: f64) -> Result<CondMeansAt> {
        let (b0, _) = self.outcome_slopes();
        let mx = self.x_means.to_vec();
        let base: f64 = mx.iter().zip(&b0).map(|(m, b)| m * b).sum();
        let gap = self.covariate_gap_mean();
        Ok(CondMeansAt {
            mu0: mx.clone(),
            mu1: mx,
            y: base + p * gap + self.g_u_given_p(p)?,
        })
    }

    /// `E[∂ξ1/∂p | Z]` at the true nuisances, as a function of `P(Z) = p`.
    pub fn zeta(&self, p: f64) -> Vec<f64> {
        let (b0, b1) = self.outcome_slopes();
        let k = 4;
        let sx = [self.x_vars[0], self.x_vars[1]];
        // ∂(c c')/∂p with c = (1 − p, p)
        let dcc = [[-2.0 * (1.0 - p), 1.0 - 2.0 * p], [1.0 - 2.0 * p, 2.0 * p]];
        let mut out = vec![0.0; k * (k + 1)];
        for col in 0..k {
            for row in 0..k {
                let (bi, xi) = (row / 2, row % 2);
                let (bj, xj) = (col / 2, col % 2);
                if xi == xj {
                    out[col * k + row] = dcc[bi][bj] * sx[xi];
                }
            }
        }
        for row in 0..k {
            let (block, xi) = (row / 2, row % 2);
            let sign = if block == 0 { -1.0 } else { 1.0 };
            out[k * k + row] = sign * sx[xi] * (p * b1[xi] + (1.0 - p) * b0[xi]);
        }
        out
    }

    pub fn draw_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentDraw {
        let e: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let mut normal = |mean: f64, var: f64| mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let x = [normal(self.x_means[0], self.x_vars[0]), normal(self.x_means[1], self.x_vars[1])];
        let z = [normal(self.z_means[0], self.z_vars[0]), normal(self.z_means[1], self.z_vars[1])];
        LatentDraw {
            x,
            z,
            u0: dot3(&self.u0_loadings, &e),
            u1: dot3(&self.u1_loadings, &e),
            us: dot3(&self.us_loadings, &e),
        }
    }

    /// Potential outcomes `(Y0, Y1)` of a latent draw.
    pub fn potential_outcomes(&self, d: &LatentDraw) -> (f64, f64) {
        let lin = |eq: &OutcomeEquation| eq.intercept + eq.slopes[0] * d.x[0] + eq.slopes[1] * d.x[1];
        (lin(&self.untreated) + d.u0, lin(&self.treated) + d.u1)
    }

    /// Treatment under the status quo.
    pub fn treatment(&self, d: &LatentDraw) -> bool {
        self.selection_index(&d.z) - d.us > 0.0
    }

    /// `U_P = Φ(U_S / σ_S)`; the unit is treated whenever `U_P < P`.
    pub fn resistance(&self, d: &LatentDraw) -> f64 {
        norm_cdf(d.us / self.selection_sd())
    }
}

/// Draws `n ≥ 2` observations with `μ0 = μ1 = (x1, x2)`.
///
/// # Panics
/// Panics if `n < 2`.
pub fn generate_sample<R: Rng + ?Sized>(params: &DgpParams, n: usize, rng: &mut R) -> Dataset {
    assert!(n >= 2, "generate_sample needs n >= 2");
    let mut y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let d = params.draw_latent(rng);
        let (y0, y1) = params.potential_outcomes(&d);
        let treated = params.treatment(&d);
        y.push(if treated { y1 } else { y0 });
        s.push(if treated { 1.0 } else { 0.0 });
        x.push(d.x.to_vec());
        z.push(d.z.to_vec());
    }
    Dataset::new(y, s, x, z).expect("simulated sample is valid")
}

/// `Φ(0.2 + 0.3 z1 + 0.1 z2)`.
pub fn true_propensity(z1: f64, z2: f64) -> f64 {
    DgpParams::default().propensity(&[z1, z2])
}

pub fn true_fp(p: f64) -> Result<(f64, f64)> {
    DgpParams::default().fp(p)
}

pub fn true_fpstar(p: f64, a: f64) -> (f64, f64) {
    DgpParams::default().fpstar(p, a).unwrap_or((f64::NAN, f64::NAN))
}

pub fn true_mte(x1: f64, x2: f64, p: f64) -> Result<f64> {
    DgpParams::default().mte(&[x1, x2], p)
}

pub fn true_g_u_given_p(params: &DgpParams, p: f64) -> Result<f64> {
    params.g_u_given_p(p)
}

pub fn true_delta_u_given_p(params: &DgpParams, p: f64) -> Result<f64> {
    params.delta_u_given_p(p)
}

pub fn true_prte(a: f64) -> Result<f64> {
    DgpParams::default().prte(a)
}

/// Monte Carlo estimate of the PRTE of `P* = P + a(1 − P)` computed by
/// switching the treatment of every simulated unit with `P ≤ U_P < P*`.
pub fn simulate_prte<R: Rng + ?Sized>(params: &DgpParams, a: f64, draws: usize, rng: &mut R) -> f64 {
    let mut total = 0.0;
    for _ in 0..draws {
        let d = params.draw_latent(rng);
        let p = params.propensity(&d.z);
        let pstar = p + a * (1.0 - p);
        let v = params.resistance(&d);
        if v >= p && v < pstar {
            let (y0, y1) = params.potential_outcomes(&d);
            total += y1 - y0;
        }
    }
    total / draws as f64
}
