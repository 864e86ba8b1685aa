//! The orthogonal moment function `m = (m1, m2, m3)` for the policy
//! relevant treatment effect, its θ-free decomposition, the map from the
//! moment vector θ to the effect, and the sandwich variance.
//!
//! θ is laid out as `(θ1, θ2, θ3)` with `θ1` of length `2p(2p+1)` (the
//! column-major `vec(B, A)` of a `2p × 2p` matrix `B` and a `2p` vector
//! `A`), `θ2` of length `2p` (`θ2,0` then `θ2,1`) and scalar `θ3`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PrteError, Result};

/// Largest condition number of `B` accepted by [`d_transform`].
pub const MAX_CONDITION: f64 = 1e12;

/// Length of θ1 for feature dimension `p`.
pub fn theta1_len(p: usize) -> usize {
    2 * p * (2 * p + 1)
}

/// Total length of θ for feature dimension `p`.
pub fn theta_len(p: usize) -> usize {
    theta1_len(p) + 2 * p + 1
}

fn feature_dim_from_theta1(len: usize) -> Result<usize> {
    // len = k (k + 1) with k = 2p
    let k = ((4.0 * len as f64 + 1.0).sqrt() - 1.0) / 2.0;
    let k = k.round() as usize;
    if k == 0 || !k.is_multiple_of(2) || k * (k + 1) != len {
        return Err(PrteError::Config(format!("θ1 has invalid length {len}")));
    }
    Ok(k / 2)
}

/// Splits θ1 into `(B, A)`.
pub fn unpack_theta1(theta1: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = feature_dim_from_theta1(theta1.len())?;
    let k = 2 * p;
    let b = DMatrix::from_column_slice(k, k, &theta1[..k * k]);
    let a = DVector::from_column_slice(&theta1[k * k..]);
    Ok((b, a))
}

/// `d(vec(B, A)) = B⁻¹ A`, returned as `(β0; β1)`.
///
/// Solved by LU with partial pivoting; rejects `B` whose condition number
/// exceeds [`MAX_CONDITION`].
pub fn d_transform(theta1: &[f64]) -> Result<Vec<f64>> {
    let (b, a) = unpack_theta1(theta1)?;
    if b.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(PrteError::Identification("θ1 contains non-finite entries".into()));
    }
    let sv = b.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(PrteError::Identification(format!(
            "feature residual second-moment matrix is singular or ill-conditioned (condition {:e})",
            max / min
        )));
    }
    let beta = b
        .lu()
        .solve(&a)
        .ok_or_else(|| PrteError::Identification("LU solve of the feature moment matrix failed".into()))?;
    Ok(beta.iter().copied().collect())
}

/// Moment vector θ together with the coefficients `(β0, β1) = d(θ1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub theta3: f64,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
}

impl ThetaEstimate {
    pub fn from_moments(theta1: Vec<f64>, theta2: Vec<f64>, theta3: f64) -> Result<Self> {
        let p = feature_dim_from_theta1(theta1.len())?;
        if theta2.len() != 2 * p {
            return Err(PrteError::Config(format!(
                "θ2 has length {}, expected {}",
                theta2.len(),
                2 * p
            )));
        }
        let beta = d_transform(&theta1)?;
        Ok(Self {
            theta1,
            theta2,
            theta3,
            beta0: beta[..p].to_vec(),
            beta1: beta[p..].to_vec(),
        })
    }

    /// Rebuilds from a flat `(θ1, θ2, θ3)` vector.
    pub fn from_flat(p: usize, v: &[f64]) -> Result<Self> {
        if v.len() != theta_len(p) {
            return Err(PrteError::Config(format!("θ has length {}, expected {}", v.len(), theta_len(p))));
        }
        let d1 = theta1_len(p);
        Self::from_moments(v[..d1].to_vec(), v[d1..d1 + 2 * p].to_vec(), v[d1 + 2 * p])
    }

    pub fn feature_dim(&self) -> usize {
        self.beta0.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta1.clone();
        v.extend_from_slice(&self.theta2);
        v.push(self.theta3);
        v
    }

    /// `(β0; β1)`.
    pub fn beta(&self) -> Vec<f64> {
        self.beta0.iter().chain(&self.beta1).copied().collect()
    }
}

/// `Λ(θ) = θ2,1' β1 − θ2,0' β0 + θ3`.
pub fn lambda_map(theta: &ThetaEstimate) -> f64 {
    let p = theta.feature_dim();
    let (t20, t21) = theta.theta2.split_at(p);
    dot(t21, &theta.beta1) - dot(t20, &theta.beta0) + theta.theta3
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `𝒰 = y − (1−s) μ0(x)'β0 − s μ1(x)'β1`.
pub fn residual_u(y: f64, s: f64, mu0x: &[f64], mu1x: &[f64], beta0: &[f64], beta1: &[f64]) -> f64 {
    y - (1.0 - s) * dot(mu0x, beta0) - s * dot(mu1x, beta1)
}

/// One evaluation of the moment function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: f64,
}

impl ScoreRow {
    pub fn len(&self) -> usize {
        self.m1.len() + self.m2.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.m1.clone();
        v.extend_from_slice(&self.m2);
        v.push(self.m3);
        v
    }
}

/// Policy-specific nuisance values at one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftInputs {
    /// `P* = P*(p̂, z)`.
    Propensity {
        pstar: f64,
        dpstar: f64,
        g_u_at_pstar: f64,
        /// `Δ̂_{U|P}` evaluated at `P*` (without the `∂P*` factor).
        delta_u_at_pstar: f64,
        delta_u_at_p: f64,
    },
    /// `P* = ĝ_{S|Z}(Z*(z))`.
    Instrument {
        p_at_zstar: f64,
        /// Diagonal of `κ̂(z)`, length `2p`.
        kappa: Vec<f64>,
        g_u_at_p_zstar: f64,
    },
}

/// Everything the score needs at one observation: the data point and the
/// values of the fitted nuisance functions there.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInputs {
    pub y: f64,
    pub s: f64,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub p_hat: f64,
    pub xi1: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Shrunk density ratio (`f̂_{P*}/f̂_P` or `f̂_{Z*(Z)}/f̂_Z`).
    pub ratio: f64,
    pub g_u_at_p: f64,
    pub shift: ShiftInputs,
}

impl ScoreInputs {
    fn stacked_features(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu0.iter().chain(&self.mu1).copied()
    }

    fn residual(&self, theta: &ThetaEstimate) -> f64 {
        residual_u(self.y, self.s, &self.mu0, &self.mu1, &theta.beta0, &theta.beta1)
    }
}

/// `m1 = ξ̂1 − θ1 + ζ̂ (s − p̂)`.
pub fn score_m1(w: &ScoreInputs, theta: &ThetaEstimate) -> Vec<f64> {
    let e = w.s - w.p_hat;
    w.xi1
        .iter()
        .zip(&w.zeta)
        .zip(&theta.theta1)
        .map(|((xi, z), t)| xi - t + z * e)
        .collect()
}

/// `m2` for either policy type.
pub fn score_m2(w: &ScoreInputs, theta: &ThetaEstimate) -> Vec<f64> {
    match &w.shift {
        ShiftInputs::Propensity { .. } => score_m2_pshift(w, theta),
        ShiftInputs::Instrument { .. } => score_m2_zshift(w, theta),
    }
}

/// `m3` for either policy type.
pub fn score_m3(w: &ScoreInputs, theta: &ThetaEstimate) -> f64 {
    match &w.shift {
        ShiftInputs::Propensity { .. } => score_m3_pshift(w, theta),
        ShiftInputs::Instrument { .. } => score_m3_zshift(w, theta),
    }
}

/// `μ(P* − p̂) − θ2 + μ(∂P* − 1)(s − p̂)` with `μ = (μ0; μ1)`.
pub fn score_m2_pshift(w: &ScoreInputs, theta: &ThetaEstimate) -> Vec<f64> {
    let ShiftInputs::Propensity { pstar, dpstar, .. } = w.shift else {
        panic!("score_m2_pshift called with instrument-shift inputs");
    };
    let gap = pstar - w.p_hat;
    let adj = (dpstar - 1.0) * (w.s - w.p_hat);
    w.stacked_features()
        .zip(&theta.theta2)
        .map(|(m, t)| m * gap - t + m * adj)
        .collect()
}

/// `ĝU(P*) − 𝒰 − θ3 + r(𝒰 − ĝU(p̂)) + [Δ̂(P*)∂P* − rΔ̂(p̂)](s − p̂)`.
pub fn score_m3_pshift(w: &ScoreInputs, theta: &ThetaEstimate) -> f64 {
    let ShiftInputs::Propensity {
        dpstar,
        g_u_at_pstar,
        delta_u_at_pstar,
        delta_u_at_p,
        ..
    } = w.shift
    else {
        panic!("score_m3_pshift called with instrument-shift inputs");
    };
    let u = w.residual(theta);
    g_u_at_pstar - u - theta.theta3
        + w.ratio * (u - w.g_u_at_p)
        + (delta_u_at_pstar * dpstar - w.ratio * delta_u_at_p) * (w.s - w.p_hat)
}

/// `μ(ĝ(Z*) − ĝ(Z)) − θ2 + (κ̂ r − I) μ (s − ĝ(Z))`.
pub fn score_m2_zshift(w: &ScoreInputs, theta: &ThetaEstimate) -> Vec<f64> {
    let ShiftInputs::Instrument { p_at_zstar, ref kappa, .. } = w.shift else {
        panic!("score_m2_zshift called with propensity-shift inputs");
    };
    let gap = p_at_zstar - w.p_hat;
    let e = w.s - w.p_hat;
    w.stacked_features()
        .zip(kappa)
        .zip(&theta.theta2)
        .map(|((m, k), t)| m * gap - t + (k * w.ratio - 1.0) * m * e)
        .collect()
}

/// `ĝU(ĝ(Z*)) − 𝒰 − θ3 + r(𝒰 − ĝU(ĝ(Z)))`.
pub fn score_m3_zshift(w: &ScoreInputs, theta: &ThetaEstimate) -> f64 {
    let ShiftInputs::Instrument { g_u_at_p_zstar, .. } = w.shift else {
        panic!("score_m3_zshift called with propensity-shift inputs");
    };
    let u = w.residual(theta);
    g_u_at_p_zstar - u - theta.theta3 + w.ratio * (u - w.g_u_at_p)
}

pub fn score(w: &ScoreInputs, theta: &ThetaEstimate) -> ScoreRow {
    ScoreRow {
        m1: score_m1(w, theta),
        m2: score_m2(w, theta),
        m3: score_m3(w, theta),
    }
}

/// The uncorrected plug-in moments (no influence-function adjustments):
/// `ξ̂1 − θ1`, `μ(P* − p̂) − θ2`, `ĝU(P*) − 𝒰 − θ3`. Useful only as a
/// non-orthogonal reference.
pub fn plug_in_score(w: &ScoreInputs, theta: &ThetaEstimate) -> ScoreRow {
    let (target, g_target) = match &w.shift {
        ShiftInputs::Propensity { pstar, g_u_at_pstar, .. } => (*pstar, *g_u_at_pstar),
        ShiftInputs::Instrument {
            p_at_zstar,
            g_u_at_p_zstar,
            ..
        } => (*p_at_zstar, *g_u_at_p_zstar),
    };
    let gap = target - w.p_hat;
    ScoreRow {
        m1: w.xi1.iter().zip(&theta.theta1).map(|(x, t)| x - t).collect(),
        m2: w.stacked_features().zip(&theta.theta2).map(|(m, t)| m * gap - t).collect(),
        m3: g_target - w.residual(theta) - theta.theta3,
    }
}

/// θ-free parts of the score: `m1 = m11 − θ1`, `m2 = m21 − θ2`,
/// `m3 = m31 − θ3 − m32' d(θ1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposed {
    pub m11: Vec<f64>,
    pub m21: Vec<f64>,
    pub m31: f64,
    pub m32: Vec<f64>,
}

impl Decomposed {
    pub fn assemble(&self, theta: &ThetaEstimate) -> ScoreRow {
        let beta = theta.beta();
        ScoreRow {
            m1: self.m11.iter().zip(&theta.theta1).map(|(a, t)| a - t).collect(),
            m2: self.m21.iter().zip(&theta.theta2).map(|(a, t)| a - t).collect(),
            m3: self.m31 - theta.theta3 - dot(&self.m32, &beta),
        }
    }
}

pub fn score_decomposed(w: &ScoreInputs) -> Decomposed {
    let e = w.s - w.p_hat;
    let m11 = w.xi1.iter().zip(&w.zeta).map(|(xi, z)| xi + z * e).collect();
    let (m21, m31) = match &w.shift {
        ShiftInputs::Propensity {
            pstar,
            dpstar,
            g_u_at_pstar,
            delta_u_at_pstar,
            delta_u_at_p,
        } => {
            let gap = pstar - w.p_hat;
            let adj = (dpstar - 1.0) * e;
            let m21 = w.stacked_features().map(|m| m * gap + m * adj).collect();
            let m31 = g_u_at_pstar - w.y
                + w.ratio * (w.y - w.g_u_at_p)
                + delta_u_at_pstar * dpstar * e
                - w.ratio * delta_u_at_p * e;
            (m21, m31)
        }
        ShiftInputs::Instrument {
            p_at_zstar,
            kappa,
            g_u_at_p_zstar,
        } => {
            let gap = p_at_zstar - w.p_hat;
            let m21 = w
                .stacked_features()
                .zip(kappa)
                .map(|(m, k)| m * gap + (k * w.ratio - 1.0) * m * e)
                .collect();
            let m31 = g_u_at_p_zstar - w.y + w.ratio * (w.y - w.g_u_at_p);
            (m21, m31)
        }
    };
    let m32 = w
        .mu0
        .iter()
        .map(|m| (w.ratio - 1.0) * (1.0 - w.s) * m)
        .chain(w.mu1.iter().map(|m| (w.ratio - 1.0) * w.s * m))
        .collect();
    Decomposed { m11, m21, m31, m32 }
}

/// Central-difference Jacobian of `d` at θ1 (`2p × 2p(2p+1)`), one column
/// per θ1 coordinate.
pub fn numeric_jacobian_d(theta1: &[f64], step: f64) -> Result<DMatrix<f64>> {
    crate::kernel::check_bandwidth("jacobian step", step)?;
    let p = feature_dim_from_theta1(theta1.len())?;
    let mut jac = DMatrix::zeros(2 * p, theta1.len());
    let mut probe = theta1.to_vec();
    for k in 0..theta1.len() {
        let col = crate::kernel::try_central_difference_vec(
            |t| {
                let mut v = probe.clone();
                v[k] = t;
                d_transform(&v)
            },
            theta1[k],
            step,
        )?;
        for (r, v) in col.into_iter().enumerate() {
            jac[(r, k)] = v;
        }
        probe[k] = theta1[k];
    }
    Ok(jac)
}

/// Gradient of Λ: `[(−θ2,0; θ2,1)' ∂d/∂θ1 | −β0', β1' | 1]`.
pub fn lambda_gradient(theta: &ThetaEstimate, step: f64) -> Result<DVector<f64>> {
    let p = theta.feature_dim();
    let jd = numeric_jacobian_d(&theta.theta1, step)?;
    let signed = DVector::from_iterator(
        2 * p,
        theta.theta2[..p].iter().map(|v| -v).chain(theta.theta2[p..].iter().copied()),
    );
    let block1 = jd.transpose() * signed;
    let mut g = Vec::with_capacity(theta_len(p));
    g.extend(block1.iter());
    g.extend(theta.beta0.iter().map(|b| -b));
    g.extend(theta.beta1.iter());
    g.push(1.0);
    Ok(DVector::from_vec(g))
}

/// `M̂`: identity except the `(θ3, θ1)` block, which holds
/// `mean(m32)' ∂d/∂θ1`. It estimates `−∂E[m]/∂θ'`.
pub fn m_hat_matrix(mean_m32: &[f64], theta1: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let p = feature_dim_from_theta1(theta1.len())?;
    if mean_m32.len() != 2 * p {
        return Err(PrteError::Config("m32 mean has the wrong length".into()));
    }
    let dim = theta_len(p);
    let mut m = DMatrix::identity(dim, dim);
    if mean_m32.iter().all(|v| *v == 0.0) {
        return Ok(m);
    }
    let jd = numeric_jacobian_d(theta1, step)?;
    let row = DVector::from_column_slice(mean_m32).transpose() * jd;
    for (k, v) in row.iter().enumerate() {
        m[(dim - 1, k)] = *v;
    }
    Ok(m)
}

/// Output of [`sandwich_variance`].
#[derive(Debug, Clone)]
pub struct Sandwich {
    /// Asymptotic variance of `√n (θ̂ − θ)`.
    pub var_theta: DMatrix<f64>,
    /// Asymptotic variance of `√n (PRTÊ − PRTE)`.
    pub var_prte: f64,
}

/// `(M'M)⁻¹ M' Σ̂ M (M'M)⁻¹` with `Σ̂ = (1/n) Σ m_i m_i'`, and its
/// projection `λ V λ'`.
pub fn sandwich_variance(rows: &[ScoreRow], m_hat: &DMatrix<f64>, lambda_grad: &DVector<f64>) -> Result<Sandwich> {
    let n = rows.len();
    if n == 0 {
        return Err(PrteError::Numerical("no score rows".into()));
    }
    let dim = m_hat.nrows();
    let mut sigma = DMatrix::<f64>::zeros(dim, dim);
    let mut flat = Vec::with_capacity(n);
    for r in rows {
        let v = DVector::from_vec(r.to_flat());
        if v.len() != dim {
            return Err(PrteError::Numerical("score row dimension does not match M̂".into()));
        }
        sigma.ger(1.0, &v, &v, 1.0);
        flat.push(v);
    }
    sigma /= n as f64;

    let mtm = m_hat.transpose() * m_hat;
    // G = (M'M)⁻¹ M'
    let g = mtm
        .lu()
        .solve(&m_hat.transpose())
        .ok_or_else(|| PrteError::Numerical("M̂ is not invertible".into()))?;
    let var_theta = &g * &sigma * g.transpose();

    // λ V λ' = (1/n) Σ (m_i' G' λ')², nonnegative by construction.
    let w = g.transpose() * lambda_grad;
    let var_prte = flat.iter().map(|v| v.dot(&w).powi(2)).sum::<f64>() / n as f64;
    if !var_prte.is_finite() || var_theta.iter().any(|v| !v.is_finite()) {
        return Err(PrteError::Numerical("non-finite sandwich variance".into()));
    }
    Ok(Sandwich { var_theta, var_prte })
}
