//! Longitudinal data with individual measurement occasions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: String,
    /// Strictly increasing measurement occasions.
    pub times: Vec<f64>,
    pub outcomes: Vec<f64>,
    /// One value per entry of the dataset's `covariate_names`.
    pub covariates: Vec<f64>,
}

/// Affine transform applied to a covariate column on ingest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongitudinalDataset {
    pub covariate_names: Vec<String>,
    pub individuals: Vec<Individual>,
    pub standardization: Vec<Standardization>,
}

impl LongitudinalDataset {
    pub fn new(covariate_names: Vec<String>, individuals: Vec<Individual>) -> Result<Self> {
        let ds = Self {
            covariate_names,
            individuals,
            standardization: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.covariate_names.len();
        for ind in &self.individuals {
            if ind.times.is_empty() {
                return invalid(format!("individual {} has no observations", ind.id));
            }
            if ind.times.len() != ind.outcomes.len() {
                return invalid(format!("individual {} has mismatched times and outcomes", ind.id));
            }
            if ind.covariates.len() != c {
                return invalid(format!(
                    "individual {} has {} covariates, expected {c}",
                    ind.id,
                    ind.covariates.len()
                ));
            }
            if ind.times.windows(2).any(|w| !(w[1] > w[0])) {
                return invalid(format!("times of individual {} are not strictly increasing", ind.id));
            }
            let finite = ind.times.iter().chain(&ind.outcomes).chain(&ind.covariates).all(|v| v.is_finite());
            if !finite {
                return invalid(format!("individual {} has non-finite values", ind.id));
            }
        }
        Ok(())
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| crate::error::Error::InvalidInput(format!("unknown covariate '{name}'")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.covariate_index(name)?;
        Ok(self.individuals.iter().map(|i| i.covariates[j]).collect())
    }

    /// Copy restricted to the given individuals (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> LongitudinalDataset {
        LongitudinalDataset {
            covariate_names: self.covariate_names.clone(),
            individuals: indices.iter().map(|&i| self.individuals[i].clone()).collect(),
            standardization: self.standardization.clone(),
        }
    }

    /// Standardizes the named columns to mean 0 and sample SD 1, recording
    /// the transform. Zero-variance columns are rejected.
    pub fn standardize(&mut self, names: &[String]) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return invalid("standardization needs at least two individuals");
        }
        for name in names {
            let j = self.covariate_index(name)?;
            let mean = self.individuals.iter().map(|i| i.covariates[j]).sum::<f64>() / n as f64;
            let var = self
                .individuals
                .iter()
                .map(|i| (i.covariates[j] - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            let sd = var.sqrt();
            if !(sd > 0.0) {
                return invalid(format!("covariate '{name}' has zero variance"));
            }
            for ind in &mut self.individuals {
                ind.covariates[j] = (ind.covariates[j] - mean) / sd;
            }
            self.standardization.push(Standardization {
                name: name.clone(),
                mean,
                sd,
            });
        }
        Ok(())
    }

    /// Mean observation time at each occasion index, over individuals that
    /// have that occasion.
    pub fn occasion_means(&self) -> Vec<f64> {
        let jmax = self.individuals.iter().map(|i| i.times.len()).max().unwrap_or(0);
        let mut sum = vec![0.0; jmax];
        let mut cnt = vec![0usize; jmax];
        for ind in &self.individuals {
            for (j, &t) in ind.times.iter().enumerate() {
                sum[j] += t;
                cnt[j] += 1;
            }
        }
        sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect()
    }

    /// Default knot search interval: from the second to the second-to-last
    /// occasion. Falls back to the observed time range for short series.
    pub fn default_knot_bounds(&self) -> (f64, f64) {
        let occ = self.occasion_means();
        let j = occ.len();
        if j >= 4 && occ[j - 2] > occ[1] {
            return (occ[1], occ[j - 2]);
        }
        let lo = self
            .individuals
            .iter()
            .flat_map(|i| i.times.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .individuals
            .iter()
            .flat_map(|i| i.times.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ind(id: &str, times: Vec<f64>, x: Vec<f64>) -> Individual {
        let outcomes = times.iter().map(|t| 2.0 * t).collect();
        Individual {
            id: id.into(),
            times,
            outcomes,
            covariates: x,
        }
    }

    #[test]
    fn validation_rules() {
        let ok = LongitudinalDataset::new(vec!["a".into()], vec![ind("1", vec![0.0, 1.0], vec![0.5])]);
        assert!(ok.is_ok());
        assert!(LongitudinalDataset::new(vec!["a".into()], vec![ind("1", vec![1.0, 1.0], vec![0.5])]).is_err());
        assert!(LongitudinalDataset::new(vec!["a".into()], vec![ind("1", vec![], vec![0.5])]).is_err());
        assert!(LongitudinalDataset::new(vec![], vec![ind("1", vec![0.0], vec![0.5])]).is_err());
    }

    #[test]
    fn standardize_records_transform() {
        let mut ds = LongitudinalDataset::new(
            vec!["a".into()],
            vec![
                ind("1", vec![0.0], vec![1.0]),
                ind("2", vec![0.0], vec![2.0]),
                ind("3", vec![0.0], vec![6.0]),
            ],
        )
        .unwrap();
        ds.standardize(&["a".into()]).unwrap();
        let col = ds.column("a").unwrap();
        let mean = col.iter().sum::<f64>() / 3.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);
        assert_eq!(ds.standardization[0].mean, 3.0);
    }

    #[test]
    fn knot_bounds_from_occasions() {
        let times: Vec<f64> = (0..10).map(f64::from).collect();
        let ds = LongitudinalDataset::new(vec![], vec![ind("1", times, vec![])]).unwrap();
        assert_eq!(ds.default_knot_bounds(), (1.0, 8.0));
    }
}
