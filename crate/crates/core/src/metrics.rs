//! Resilience of a goodput series against target levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evenly spaced target goodputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetGrid {
    pub g_min: f64,
    pub g_max: f64,
    pub points: usize,
}

impl Default for TargetGrid {
    fn default() -> Self {
        Self {
            g_min: 0.01,
            g_max: 1.0,
            points: 100,
        }
    }
}

impl TargetGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_min > 0.0 && self.g_min <= self.g_max) || self.points < 2 {
            return Err(Error::Config(format!(
                "target grid needs 0 < g_min <= g_max and at least 2 points, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let step = (self.g_max - self.g_min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.g_min + step * i as f64).collect()
    }
}

fn check_series(series: &[f64]) -> Result<()> {
    if series.is_empty() {
        return Err(Error::Empty("goodput series"));
    }
    if let Some(g) = series.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::OutOfRange(format!("goodput {g} outside [0, 1]")));
    }
    Ok(())
}

/// Mean over episodes of min(G_n / target, 1).
pub fn resilience(series: &[f64], target: f64) -> Result<f64> {
    check_series(series)?;
    if !(target > 0.0) {
        return Err(Error::OutOfRange(format!("target goodput must be positive, got {target}")));
    }
    Ok(series.iter().map(|g| (g / target).min(1.0)).sum::<f64>() / series.len() as f64)
}

/// Resilience at every grid point.
pub fn resilience_curve(series: &[f64], grid: &TargetGrid) -> Result<Vec<(f64, f64)>> {
    grid.validate()?;
    grid.values()
        .into_iter()
        .map(|g| Ok((g, resilience(series, g)?)))
        .collect()
}

/// Resilience averaged uniformly over the target grid.
pub fn meta_resilience(series: &[f64], grid: &TargetGrid) -> Result<f64> {
    let curve = resilience_curve(series, grid)?;
    Ok(curve.iter().map(|(_, r)| r).sum::<f64>() / curve.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resilience_examples() {
        assert_eq!(resilience(&[0.5; 4], 1.0).unwrap(), 0.5);
        assert_eq!(resilience(&[0.3, 0.9], 0.3).unwrap(), 1.0);
        let r = resilience(&[0.2, 0.4, 0.6], 0.5).unwrap();
        assert!((r - 2.2 / 3.0).abs() < 1e-15);
        assert!(resilience(&[0.5], 0.0).is_err());
        assert!(resilience(&[], 0.5).is_err());
        assert!(resilience(&[1.2], 0.5).is_err());
    }

    #[test]
    fn grid_values() {
        let v = TargetGrid::default().values();
        assert_eq!(v.len(), 100);
        assert_eq!(v[0], 0.01);
        assert!((v[99] - 1.0).abs() < 1e-15);
        assert!((v[1] - 0.02).abs() < 1e-15);
        assert!(TargetGrid { points: 1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn meta_resilience_of_perfect_series_is_one() {
        assert_eq!(meta_resilience(&[1.0; 7], &TargetGrid::default()).unwrap(), 1.0);
    }

    #[test]
    fn curve_starts_at_one_and_matches_mean() {
        let s = [0.3, 0.05, 0.7];
        let grid = TargetGrid::default();
        let c = resilience_curve(&s, &grid).unwrap();
        assert_eq!(c[0].1, 1.0);
        let mean = c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64;
        assert_eq!(meta_resilience(&s, &grid).unwrap(), mean);
    }
}
