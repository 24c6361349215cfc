//! Four-tank dynamics with a smoothed square root.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use ellada_core::DomainError;

/// Below this level `sqrt(h)` is replaced by a cubic with matching value,
/// slope and curvature sign at the junction.
pub const SQRT_SMOOTHING: f64 = 1e-6;

/// Table of the plant: tank and outlet areas (cm^2), valve splits, pump gains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TankModel {
    pub tank_area: [f64; 4],
    pub outlet_area: [f64; 4],
    pub gamma: [f64; 2],
    pub pump_gain: [f64; 2],
}

impl Default for TankModel {
    // the 3.14 is a pump gain
    #[allow(clippy::approx_constant)]
    fn default() -> Self {
        Self {
            tank_area: [28.0, 32.0, 28.0, 32.0],
            outlet_area: [3.145, 2.525, 3.145, 2.525],
            gamma: [0.43, 0.34],
            pump_gain: [3.14, 3.29],
        }
    }
}

/// Rounded nominal operating point.
pub const NOMINAL_INPUT: [f64; 2] = [3.15, 3.15];
pub const NOMINAL_LEVELS: [f64; 4] = [12.44, 13.17, 4.73, 4.99];

/// Inflow from an upper tank: `(lower, upper)` pairs.
pub const GRAVITY_FEEDS: [(usize, usize); 2] = [(0, 2), (1, 3)];

/// `s(h)`; equals `sqrt(h)` for `h >= eps` and is C^1 across `eps`.
pub fn smooth_sqrt(h: f64) -> f64 {
    let e = SQRT_SMOOTHING;
    if h >= e {
        h.sqrt()
    } else {
        h * (3.0 * e - h) / (2.0 * e.powf(1.5))
    }
}

pub fn smooth_sqrt_d1(h: f64) -> f64 {
    let e = SQRT_SMOOTHING;
    if h >= e {
        0.5 / h.sqrt()
    } else {
        (3.0 * e - 2.0 * h) / (2.0 * e.powf(1.5))
    }
}

pub fn smooth_sqrt_d2(h: f64) -> f64 {
    let e = SQRT_SMOOTHING;
    if h >= e {
        -0.25 / (h * h.sqrt())
    } else {
        -1.0 / e.powf(1.5)
    }
}

impl TankModel {
    /// `dh_i/dt` contribution `-a_i/A_i s(h_i)`.
    pub fn outflow_coef(&self, tank: usize) -> f64 {
        self.outlet_area[tank] / self.tank_area[tank]
    }

    /// Coefficient of `s(h_upper)` in `dh_lower/dt`.
    pub fn feed_coef(&self, lower: usize, upper: usize) -> f64 {
        self.outlet_area[upper] / self.tank_area[lower]
    }

    /// Upper tank draining into `tank`, if any.
    pub fn upstream_of(tank: usize) -> Option<usize> {
        GRAVITY_FEEDS
            .iter()
            .find(|(l, _)| *l == tank)
            .map(|(_, u)| *u)
    }

    /// Coefficient of `v_pump` in `dh_tank/dt`.
    pub fn pump_coef(&self, tank: usize, pump: usize) -> f64 {
        let (g, k) = (self.gamma[pump], self.pump_gain[pump]);
        let share = match (tank, pump) {
            (0, 0) | (1, 1) => g,
            (3, 0) | (2, 1) => 1.0 - g,
            _ => 0.0,
        };
        share * k / self.tank_area[tank]
    }

    pub fn rhs(&self, h: &Vector4<f64>, v: &Vector2<f64>) -> Result<Vector4<f64>, DomainError> {
        for (i, &hi) in h.iter().enumerate() {
            if !(hi >= -SQRT_SMOOTHING) {
                return Err(DomainError(format!("level of tank {} is {hi:e} cm", i + 1)));
            }
        }
        Ok(self.rhs_unchecked(h, v))
    }

    pub fn rhs_unchecked(&self, h: &Vector4<f64>, v: &Vector2<f64>) -> Vector4<f64> {
        Vector4::from_fn(|i, _| {
            let mut d = -self.outflow_coef(i) * smooth_sqrt(h[i]);
            if let Some(u) = Self::upstream_of(i) {
                d += self.feed_coef(i, u) * smooth_sqrt(h[u]);
            }
            d + self.pump_coef(i, 0) * v[0] + self.pump_coef(i, 1) * v[1]
        })
    }

    pub fn state_jacobian(&self, h: &Vector4<f64>) -> Matrix4<f64> {
        let mut j = Matrix4::zeros();
        for i in 0..4 {
            j[(i, i)] = -self.outflow_coef(i) * smooth_sqrt_d1(h[i]);
            if let Some(u) = Self::upstream_of(i) {
                j[(i, u)] = self.feed_coef(i, u) * smooth_sqrt_d1(h[u]);
            }
        }
        j
    }

    pub fn input_jacobian(&self) -> Matrix4x2<f64> {
        Matrix4x2::from_fn(|i, p| self.pump_coef(i, p))
    }

    /// Exact equilibrium levels for a constant input.
    pub fn steady_state(&self, v: &Vector2<f64>) -> Vector4<f64> {
        let mut root = [0.0; 4];
        // tanks 3 and 4 only see their pump
        for i in [2, 3] {
            root[i] =
                (self.pump_coef(i, 0) * v[0] + self.pump_coef(i, 1) * v[1]) / self.outflow_coef(i);
        }
        for i in [0, 1] {
            let u = Self::upstream_of(i).unwrap();
            let inflow = self.feed_coef(i, u) * root[u]
                + self.pump_coef(i, 0) * v[0]
                + self.pump_coef(i, 1) * v[1];
            root[i] = inflow / self.outflow_coef(i);
        }
        Vector4::from_fn(|i, _| root[i] * root[i])
    }
}
