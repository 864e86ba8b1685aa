//! Observed sample `(Y, S, X, Z)` together with the known covariate feature
//! maps `μ0`, `μ1`. Feature values are evaluated once at construction.

use std::fmt;
use std::sync::Arc;

use crate::error::{PrteError, Result};

pub type FeatureFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A known covariate feature map.
#[derive(Clone)]
pub enum FeatureMap {
    /// `μ(x) = x`.
    Identity,
    Custom(FeatureFn),
}

impl FeatureMap {
    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        FeatureMap::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => x.to_vec(),
            FeatureMap::Custom(f) => f(x),
        }
    }
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::Identity => f.write_str("Identity"),
            FeatureMap::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    s: Vec<f64>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    mu0_map: FeatureMap,
    mu1_map: FeatureMap,
    mu0: Vec<Vec<f64>>,
    mu1: Vec<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset with identity feature maps `μ0 = μ1 = x`.
    pub fn new(y: Vec<f64>, s: Vec<f64>, x: Vec<Vec<f64>>, z: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_feature_maps(y, s, x, z, FeatureMap::Identity, FeatureMap::Identity)
    }

    pub fn with_feature_maps(
        y: Vec<f64>,
        s: Vec<f64>,
        x: Vec<Vec<f64>>,
        z: Vec<Vec<f64>>,
        mu0_map: FeatureMap,
        mu1_map: FeatureMap,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(PrteError::Dataset(format!("need at least 2 observations, got {n}")));
        }
        if s.len() != n || x.len() != n || z.len() != n {
            return Err(PrteError::Dataset(format!(
                "column lengths differ: y {n}, s {}, x {}, z {}",
                s.len(),
                x.len(),
                z.len()
            )));
        }
        if let Some(i) = s.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(PrteError::Dataset(format!(
                "treatment indicator must be 0 or 1, observation {i} has {}",
                s[i]
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(PrteError::Dataset(format!("non-finite outcome at observation {i}")));
        }
        check_rows("covariate", &x, false)?;
        check_rows("instrument", &z, true)?;

        let mu0: Vec<Vec<f64>> = x.iter().map(|r| mu0_map.eval(r)).collect();
        let mu1: Vec<Vec<f64>> = x.iter().map(|r| mu1_map.eval(r)).collect();
        let p = mu0[0].len();
        if p == 0 {
            return Err(PrteError::Dataset("feature maps must return at least one feature".into()));
        }
        for (i, (a, b)) in mu0.iter().zip(&mu1).enumerate() {
            if a.len() != p || b.len() != p {
                return Err(PrteError::Dataset(format!(
                    "feature maps returned inconsistent dimensions at observation {i}"
                )));
            }
            if a.iter().chain(b).any(|v| !v.is_finite()) {
                return Err(PrteError::Dataset(format!("non-finite feature value at observation {i}")));
            }
        }
        Ok(Self {
            y,
            s,
            x,
            z,
            mu0_map,
            mu1_map,
            mu0,
            mu1,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Feature dimension `p`.
    pub fn feature_dim(&self) -> usize {
        self.mu0[0].len()
    }

    pub fn instrument_dim(&self) -> usize {
        self.z[0].len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn z(&self) -> &[Vec<f64>] {
        &self.z
    }

    /// `μ0(X_i)` for every observation.
    pub fn mu0(&self) -> &[Vec<f64>] {
        &self.mu0
    }

    pub fn mu1(&self) -> &[Vec<f64>] {
        &self.mu1
    }

    pub fn feature_maps(&self) -> (&FeatureMap, &FeatureMap) {
        (&self.mu0_map, &self.mu1_map)
    }

    /// The observations at `idx`, in that order, sharing the feature maps.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &[Vec<f64>]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            x: pick(&self.x),
            z: pick(&self.z),
            mu0_map: self.mu0_map.clone(),
            mu1_map: self.mu1_map.clone(),
            mu0: pick(&self.mu0),
            mu1: pick(&self.mu1),
        }
    }
}

fn check_rows(what: &str, rows: &[Vec<f64>], need_nonempty: bool) -> Result<()> {
    let d = rows[0].len();
    if need_nonempty && d == 0 {
        return Err(PrteError::Dataset(format!("{what} matrix has no columns")));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(PrteError::Dataset(format!(
                "{what} row {i} has {} columns, expected {d}",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(PrteError::Dataset(format!("non-finite {what} value at observation {i}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            vec![1.0, 2.0, 3.0],
            vec![0.0, 1.0, 1.0],
            vec![vec![0.5], vec![1.5], vec![-1.0]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]],
        )
    }

    #[test]
    fn identity_maps() {
        let (y, s, x, z) = tiny();
        let d = Dataset::new(y, s, x, z).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.feature_dim(), 1);
        assert_eq!(d.mu1()[1], vec![1.5]);
    }

    #[test]
    fn custom_maps() {
        let (y, s, x, z) = tiny();
        let d = Dataset::with_feature_maps(
            y,
            s,
            x,
            z,
            FeatureMap::custom(|x| vec![1.0, x[0]]),
            FeatureMap::custom(|x| vec![x[0], x[0] * x[0]]),
        )
        .unwrap();
        assert_eq!(d.feature_dim(), 2);
        assert_eq!(d.mu0()[2], vec![1.0, -1.0]);
        assert_eq!(d.mu1()[2], vec![-1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let (y, mut s, x, z) = tiny();
        s[1] = 2.0;
        assert!(matches!(Dataset::new(y, s, x, z), Err(PrteError::Dataset(_))));

        let (y, s, mut x, z) = tiny();
        x[2].push(1.0);
        assert!(Dataset::new(y, s, x, z).is_err());

        let (_, s, x, z) = tiny();
        assert!(Dataset::new(vec![1.0, 2.0], s, x, z).is_err());

        assert!(Dataset::new(vec![1.0], vec![0.0], vec![vec![1.0]], vec![vec![1.0]]).is_err());

        let (y, s, x, z) = tiny();
        let bad = Dataset::with_feature_maps(
            y,
            s,
            x,
            z,
            FeatureMap::Identity,
            FeatureMap::custom(|x| vec![x[0], 0.0]),
        );
        assert!(bad.is_err());
    }
}
