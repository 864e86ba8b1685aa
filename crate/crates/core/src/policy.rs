//! Counterfactual policies: a map from the status-quo propensity to the
//! post-policy propensity `P*`, or a shift of the instruments `Z ↦ Z*(Z)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{PrteError, Result};
use crate::kernel::central_difference;

pub type PShiftFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type ZShiftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum Policy {
    /// `P* = P + a (1 - P)` with `a ∈ [0, 1)`.
    ProportionalShift { a: f64 },
    /// A user-supplied `P*(p, z)` together with `∂P*/∂p`.
    GeneralPShift { pstar: PShiftFn, dpstar: PShiftFn },
    /// `P* = P(Z*(Z))`.
    ZShift { zstar: ZShiftFn },
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::ProportionalShift { a } => write!(f, "ProportionalShift {{ a: {a} }}"),
            Policy::GeneralPShift { .. } => f.write_str("GeneralPShift(..)"),
            Policy::ZShift { .. } => f.write_str("ZShift(..)"),
        }
    }
}

impl Policy {
    pub fn proportional(a: f64) -> Result<Self> {
        if !(a.is_finite() && (0.0..1.0).contains(&a)) {
            return Err(PrteError::Config(format!("policy intensity a must lie in [0, 1), got {a}")));
        }
        Ok(Policy::ProportionalShift { a })
    }

    pub fn general<F, G>(pstar: F, dpstar: G) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Policy::GeneralPShift {
            pstar: Arc::new(pstar),
            dpstar: Arc::new(dpstar),
        }
    }

    pub fn zshift<F>(zstar: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Policy::ZShift {
            zstar: Arc::new(zstar),
        }
    }

    /// Instrument translation `z ↦ z + shift` applied to every coordinate.
    pub fn z_translation(shift: f64) -> Self {
        Policy::zshift(move |z: &[f64]| z.iter().map(|v| v + shift).collect())
    }

    pub fn is_zshift(&self) -> bool {
        matches!(self, Policy::ZShift { .. })
    }

    /// `P*(p, z)`; `None` for instrument-shift policies.
    pub fn pstar(&self, p: f64, z: &[f64]) -> Option<f64> {
        match self {
            Policy::ProportionalShift { a } => Some(p + a * (1.0 - p)),
            Policy::GeneralPShift { pstar, .. } => Some(pstar(p, z)),
            Policy::ZShift { .. } => None,
        }
    }

    /// `∂P*(p, z)/∂p`; `None` for instrument-shift policies.
    pub fn dpstar(&self, p: f64, z: &[f64]) -> Option<f64> {
        match self {
            Policy::ProportionalShift { a } => Some(1.0 - a),
            Policy::GeneralPShift { dpstar, .. } => Some(dpstar(p, z)),
            Policy::ZShift { .. } => None,
        }
    }

    pub fn zstar(&self, z: &[f64]) -> Option<Vec<f64>> {
        match self {
            Policy::ZShift { zstar } => Some(zstar(z)),
            _ => None,
        }
    }

    /// Checks the supplied derivative against a central difference of `P*`
    /// at the given `(p, z)` points (tolerance 1e-4).
    pub fn check_derivative(&self, points: &[(f64, Vec<f64>)], delta: f64) -> Result<()> {
        let Policy::GeneralPShift { pstar, dpstar } = self else {
            return Ok(());
        };
        for (p, z) in points {
            let numeric = central_difference(|q| pstar(q, z), *p, delta);
            let supplied = dpstar(*p, z);
            if (numeric - supplied).abs() > 1e-4 {
                return Err(PrteError::Config(format!(
                    "policy derivative {supplied} disagrees with central difference {numeric} at p = {p}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn proportional_shift() {
        let pol = Policy::proportional(0.5).unwrap();
        assert!((pol.pstar(0.2, &[]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(pol.dpstar(0.2, &[]), Some(0.5));
        assert!(Policy::proportional(1.0).is_err());
        assert!(Policy::proportional(-0.1).is_err());
    }

    #[test]
    fn derivative_check() {
        let good = Policy::general(|p, _| p * p, |p, _| 2.0 * p);
        let pts: Vec<(f64, Vec<f64>)> = (1..10).map(|i| (i as f64 / 10.0, vec![0.0])).collect();
        assert!(good.check_derivative(&pts, 0.01).is_ok());
        let bad = Policy::general(|p, _| p * p, |_, _| 1.0);
        assert!(bad.check_derivative(&pts, 0.01).is_err());
    }

    #[test]
    fn z_translation() {
        let pol = Policy::z_translation(1.5);
        assert!(pol.is_zshift());
        assert_eq!(pol.zstar(&[0.0, -1.0]), Some(vec![1.5, 0.5]));
        assert_eq!(pol.pstar(0.3, &[0.0]), None);
    }

    proptest! {
        #[test]
        fn proportional_stays_in_unit_interval(a in 0.0f64..0.999, p in 0.0f64..=1.0) {
            let pol = Policy::proportional(a).unwrap();
            let ps = pol.pstar(p, &[]).unwrap();
            prop_assert!((0.0..=1.0).contains(&ps));
            prop_assert!(ps >= p);
        }
    }
}
