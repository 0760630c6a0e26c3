//! Uniform time and space grids shared by the flow integrator and the HJB sweep.

use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

/// `t_m = start + m·dt`, `m = 0..=steps`, ending at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(MfgError::InvalidConfig(format!("time grid [{start}, {end}] with {steps} steps")));
        }
        Ok(Self { start, end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.end - self.start) / self.steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        if m == self.steps {
            self.end
        } else {
            self.start + m as f64 * self.dt()
        }
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|m| self.time(m))
    }

    /// Index of the last grid time not exceeding `t` (within rounding).
    pub fn index_at_or_before(&self, t: f64) -> usize {
        let raw = ((t - self.start) / self.dt() + 1e-9).floor();
        (raw.max(0.0) as usize).min(self.steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl SpaceGrid {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        if nodes < 3 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(MfgError::InvalidConfig(format!("space grid [{lo}, {hi}] with {nodes} nodes (need >= 3)")));
        }
        Ok(Self { lo, hi, nodes })
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.dx()
        }
    }

    pub fn nodes_iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes).map(|i| self.node(i))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Cell index and weight of `x` after clamping to the domain.
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x.clamp(self.lo, self.hi) - self.lo) / self.dx()).max(0.0);
        let i = (s.floor() as usize).min(self.nodes - 2);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }

    /// Piecewise-linear interpolation of nodal `values`, clamped at the edges.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.nodes);
        let (i, w) = self.locate(x);
        (1.0 - w) * values[i] + w * values[i + 1]
    }

    /// Central differences inside, one-sided differences at the two ends.
    pub fn gradient(&self, values: &[f64]) -> Vec<f64> {
        let n = self.nodes;
        let dx = self.dx();
        (0..n)
            .map(|i| match i {
                0 => (values[1] - values[0]) / dx,
                _ if i == n - 1 => (values[n - 1] - values[n - 2]) / dx,
                _ => (values[i + 1] - values[i - 1]) / (2.0 * dx),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_is_exact_for_linear_data_and_clamps() {
        let g = SpaceGrid::new(-1.0, 1.0, 11).unwrap();
        let vals: Vec<f64> = g.nodes_iter().map(|x| 3.0 * x - 1.0).collect();
        for x in [-1.0, -0.33, 0.0, 0.71, 1.0] {
            assert!((g.interpolate(&vals, x) - (3.0 * x - 1.0)).abs() < 1e-14);
        }
        assert_eq!(g.interpolate(&vals, 5.0), vals[10]);
        assert_eq!(g.interpolate(&vals, -5.0), vals[0]);
        assert!(g.gradient(&vals).iter().all(|d| (d - 3.0).abs() < 1e-12));
    }

    #[test]
    fn time_grid_ends_exactly_at_horizon() {
        let t = TimeGrid::new(0.1, 0.7, 3).unwrap();
        assert_eq!(t.time(3), 0.7);
        assert_eq!(t.index_at_or_before(0.3), 1);
        assert_eq!(t.index_at_or_before(0.7), 3);
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
    }
}
