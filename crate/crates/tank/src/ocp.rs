//! Direct transcription of the tank optimal control problem.
//!
//! One [`TankOcp`] covers the centralized problem, each subsystem of the
//! distributed problem and the decentralized baselines: it owns some tanks and
//! pumps and reads the remaining upstream tanks either as its own copy
//! variables or as a frozen trajectory.

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ellada_core::graph::AgentSubproblem;

use crate::model::{smooth_sqrt, smooth_sqrt_d1, smooth_sqrt_d2, TankModel, NOMINAL_INPUT};

/// Radau IIA collocation; one stage is implicit Euler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    #[default]
    ImplicitEuler,
    Radau2,
}

impl Discretization {
    pub fn stages(self) -> usize {
        match self {
            Discretization::ImplicitEuler => 1,
            Discretization::Radau2 => 2,
        }
    }

    /// Butcher matrix, row `l` for stage `l`.
    pub fn tableau(self) -> &'static [&'static [f64]] {
        match self {
            Discretization::ImplicitEuler => &[&[1.0]],
            Discretization::Radau2 => &[&[5.0 / 12.0, -1.0 / 12.0], &[0.75, 0.25]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpSpec {
    pub horizon: usize,
    /// Sampling interval, also the transcription step (s).
    pub dt: f64,
    pub state_weight: f64,
    pub input_weight: f64,
    pub input_min: f64,
    pub input_max: f64,
    /// Input at the setpoint; the setpoint levels are its exact equilibrium.
    pub setpoint_input: [f64; 2],
    pub discretization: Discretization,
}

impl Default for OcpSpec {
    fn default() -> Self {
        Self {
            horizon: 40,
            dt: 10.0,
            state_weight: 1.0,
            input_weight: 0.01,
            input_min: 2.5,
            input_max: 3.5,
            setpoint_input: NOMINAL_INPUT,
            discretization: Discretization::ImplicitEuler,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OcpError {
    #[error("invalid horizon settings: {0}")]
    Spec(String),
    #[error("tank {tank} is driven by pump {pump}, which this subproblem does not own")]
    MissingPump { tank: usize, pump: usize },
    #[error("tank {tank} is fed by tank {upper}, which is neither owned nor read upstream")]
    MissingUpstream { tank: usize, upper: usize },
    #[error("frozen trajectory of tank {tank} has {got} points, expected {expected}")]
    FrozenLength {
        tank: usize,
        got: usize,
        expected: usize,
    },
}

impl OcpSpec {
    pub fn validate(&self) -> Result<(), OcpError> {
        if self.horizon == 0 {
            return Err(OcpError::Spec("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(OcpError::Spec("dt must be positive".into()));
        }
        if !(self.state_weight >= 0.0 && self.input_weight >= 0.0) {
            return Err(OcpError::Spec("weights must be nonnegative".into()));
        }
        for v in self.setpoint_input {
            if !(self.input_min < v && v < self.input_max) {
                return Err(OcpError::Spec(
                    "setpoint input must lie strictly inside the bounds".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of transcription points (mesh plus interior stages).
    pub fn points(&self) -> usize {
        self.horizon * self.discretization.stages() + 1
    }

    /// Point index of mesh node `j`.
    pub fn mesh_point(&self, j: usize) -> usize {
        j * self.discretization.stages()
    }

    /// Point index of stage `l` in interval `j`.
    pub fn stage_point(&self, j: usize, l: usize) -> usize {
        j * self.discretization.stages() + l + 1
    }

    pub fn setpoint(&self, model: &TankModel) -> Vector4<f64> {
        model.steady_state(&Vector2::from(self.setpoint_input))
    }
}

/// Where an upstream tank's level comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Upstream {
    /// Own copy variables, tied to the owner through coupling.
    Copy,
    /// Fixed values at every transcription point.
    Frozen(Vec<f64>),
}

/// Levels at every transcription point plus piecewise-constant inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub levels: Vec<Vector4<f64>>,
    pub inputs: Vec<Vector2<f64>>,
}

#[derive(Clone, Debug)]
pub struct TankOcp {
    model: TankModel,
    spec: OcpSpec,
    setpoint: Vector4<f64>,
    tanks: Vec<usize>,
    pumps: Vec<usize>,
    upstream: Vec<(usize, Upstream)>,
    initial: Vec<f64>,
    warm: DVector<f64>,
    /// Tanks with variables: own first, then copies.
    slots: Vec<usize>,
}

impl TankOcp {
    /// `initial` lists the measured levels of `tanks`; `warm` is a starting
    /// trajectory (inputs clamped into the open bounds).
    pub fn new(
        model: TankModel,
        spec: OcpSpec,
        tanks: Vec<usize>,
        pumps: Vec<usize>,
        upstream: Vec<(usize, Upstream)>,
        initial: Vec<f64>,
        warm: &Trajectory,
    ) -> Result<Self, OcpError> {
        spec.validate()?;
        assert_eq!(
            initial.len(),
            tanks.len(),
            "one measured level per owned tank"
        );
        for &t in &tanks {
            for p in 0..2 {
                if model.pump_coef(t, p) != 0.0 && !pumps.contains(&p) {
                    return Err(OcpError::MissingPump { tank: t, pump: p });
                }
            }
            if let Some(u) = TankModel::upstream_of(t) {
                if !tanks.contains(&u) && !upstream.iter().any(|(k, _)| *k == u) {
                    return Err(OcpError::MissingUpstream { tank: t, upper: u });
                }
            }
        }
        for (tank, src) in &upstream {
            if let Upstream::Frozen(v) = src {
                if v.len() != spec.points() {
                    return Err(OcpError::FrozenLength {
                        tank: *tank,
                        got: v.len(),
                        expected: spec.points(),
                    });
                }
            }
        }
        let mut slots = tanks.clone();
        slots.extend(
            upstream
                .iter()
                .filter(|(_, s)| matches!(s, Upstream::Copy))
                .map(|(t, _)| *t),
        );
        let setpoint = spec.setpoint(&model);
        let mut ocp = Self {
            model,
            spec,
            setpoint,
            tanks,
            pumps,
            upstream,
            initial,
            warm: DVector::zeros(0),
            slots,
        };
        ocp.warm = ocp.pack(warm);
        Ok(ocp)
    }

    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn tanks(&self) -> &[usize] {
        &self.tanks
    }

    pub fn pumps(&self) -> &[usize] {
        &self.pumps
    }

    fn width(&self) -> usize {
        self.slots.len()
    }

    fn block(&self) -> usize {
        self.spec.discretization.stages() * self.width() + self.pumps.len()
    }

    fn point_offset(&self, pt: usize) -> usize {
        let s = self.spec.discretization.stages();
        let (j, l) = (pt / s, pt % s);
        let base = j * self.block();
        if l == 0 {
            base
        } else {
            base + self.width() + self.pumps.len() + (l - 1) * self.width()
        }
    }

    /// Variable index of `tank`'s level at point `pt`, if it is a variable.
    pub fn level_index(&self, tank: usize, pt: usize) -> Option<usize> {
        let slot = self.slots.iter().position(|&t| t == tank)?;
        Some(self.point_offset(pt) + slot)
    }

    /// Variable index of `pump`'s input over interval `j`.
    pub fn input_index(&self, pump: usize, j: usize) -> Option<usize> {
        let k = self.pumps.iter().position(|&p| p == pump)?;
        Some(j * self.block() + self.width() + k)
    }

    fn level(&self, x: &DVector<f64>, tank: usize, pt: usize) -> f64 {
        if let Some(i) = self.level_index(tank, pt) {
            return x[i];
        }
        match self.upstream.iter().find(|(t, _)| *t == tank) {
            Some((_, Upstream::Frozen(v))) => v[pt],
            _ => unreachable!("tank {tank} is not visible to this subproblem"),
        }
    }

    /// Pick the variables out of a full trajectory.
    pub fn pack(&self, traj: &Trajectory) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        let margin = 1e-3 * (self.spec.input_max - self.spec.input_min);
        for pt in 0..self.spec.points() {
            for &t in &self.slots {
                x[self.level_index(t, pt).unwrap()] = traj.levels[pt][t];
            }
        }
        for j in 0..self.spec.horizon {
            for &p in &self.pumps {
                x[self.input_index(p, j).unwrap()] = traj.inputs[j][p]
                    .clamp(self.spec.input_min + margin, self.spec.input_max - margin);
            }
        }
        x
    }

    /// Level trajectory of `tank` over all points.
    pub fn levels_of(&self, x: &DVector<f64>, tank: usize) -> Vec<f64> {
        (0..self.spec.points())
            .map(|pt| self.level(x, tank, pt))
            .collect()
    }

    pub fn inputs_of(&self, x: &DVector<f64>, pump: usize) -> Vec<f64> {
        (0..self.spec.horizon)
            .map(|j| x[self.input_index(pump, j).expect("pump not owned")])
            .collect()
    }

    /// Right-hand side of an owned tank at point `pt` under input interval `j`.
    fn tank_rate(&self, x: &DVector<f64>, tank: usize, pt: usize, j: usize) -> f64 {
        let m = &self.model;
        let mut d = -m.outflow_coef(tank) * smooth_sqrt(self.level(x, tank, pt));
        if let Some(u) = TankModel::upstream_of(tank) {
            d += m.feed_coef(tank, u) * smooth_sqrt(self.level(x, u, pt));
        }
        for &p in &self.pumps {
            d += m.pump_coef(tank, p) * x[self.input_index(p, j).unwrap()];
        }
        d
    }

    fn stage_cost_points(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.spec.horizon).map(|j| self.spec.mesh_point(j))
    }

    fn bound_rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.spec.horizon).flat_map(move |j| {
            self.pumps.iter().flat_map(move |&p| {
                let i = self.input_index(p, j).unwrap();
                [(i, 1.0), (i, -1.0)]
            })
        })
    }
}

impl AgentSubproblem for TankOcp {
    fn dim(&self) -> usize {
        self.spec.horizon * self.block() + self.width()
    }

    fn num_ineq(&self) -> usize {
        2 * self.spec.horizon * self.pumps.len()
    }

    fn num_eq(&self) -> usize {
        self.tanks.len() * (1 + self.spec.horizon * self.spec.discretization.stages())
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let q = self.spec.state_weight;
        let r = self.spec.input_weight;
        let mut f = 0.0;
        for pt in self.stage_cost_points() {
            for &t in &self.tanks {
                let e = x[self.level_index(t, pt).unwrap()] - self.setpoint[t];
                f += q * e * e;
            }
        }
        for j in 0..self.spec.horizon {
            for &p in &self.pumps {
                let e = x[self.input_index(p, j).unwrap()] - self.spec.setpoint_input[p];
                f += r * e * e;
            }
        }
        f
    }

    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for pt in self.stage_cost_points() {
            for &t in &self.tanks {
                let i = self.level_index(t, pt).unwrap();
                g[i] = 2.0 * self.spec.state_weight * (x[i] - self.setpoint[t]);
            }
        }
        for j in 0..self.spec.horizon {
            for &p in &self.pumps {
                let i = self.input_index(p, j).unwrap();
                g[i] = 2.0 * self.spec.input_weight * (x[i] - self.spec.setpoint_input[p]);
            }
        }
        g
    }

    fn objective_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for pt in self.stage_cost_points() {
            for &t in &self.tanks {
                let i = self.level_index(t, pt).unwrap();
                h[(i, i)] = 2.0 * self.spec.state_weight;
            }
        }
        for j in 0..self.spec.horizon {
            for &p in &self.pumps {
                let i = self.input_index(p, j).unwrap();
                h[(i, i)] = 2.0 * self.spec.input_weight;
            }
        }
        Some(h)
    }

    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        let (lo, hi) = (self.spec.input_min, self.spec.input_max);
        DVector::from_iterator(
            self.num_ineq(),
            self.bound_rows()
                .map(|(i, s)| if s > 0.0 { x[i] - hi } else { lo - x[i] }),
        )
    }

    fn ineq_jac(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_ineq(), self.dim());
        for (row, (i, s)) in self.bound_rows().enumerate() {
            jac[(row, i)] = s;
        }
        jac
    }

    fn ineq_hessian(&self, _x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.dim(), self.dim()))
    }

    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_eq());
        let mut row = 0;
        for (k, &t) in self.tanks.iter().enumerate() {
            out[row] = x[self.level_index(t, 0).unwrap()] - self.initial[k];
            row += 1;
        }
        let a = self.spec.discretization.tableau();
        let dt = self.spec.dt;
        for j in 0..self.spec.horizon {
            let start = self.spec.mesh_point(j);
            for (l, a_row) in a.iter().enumerate() {
                let pt = self.spec.stage_point(j, l);
                for &t in &self.tanks {
                    let mut v = x[self.level_index(t, pt).unwrap()]
                        - x[self.level_index(t, start).unwrap()];
                    for (m, &a_lm) in a_row.iter().enumerate() {
                        v -= dt * a_lm * self.tank_rate(x, t, self.spec.stage_point(j, m), j);
                    }
                    out[row] = v;
                    row += 1;
                }
            }
        }
        out
    }

    fn eq_jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_eq(), self.dim());
        let mut row = 0;
        for &t in &self.tanks {
            jac[(row, self.level_index(t, 0).unwrap())] = 1.0;
            row += 1;
        }
        let a = self.spec.discretization.tableau();
        let dt = self.spec.dt;
        let m = &self.model;
        for j in 0..self.spec.horizon {
            let start = self.spec.mesh_point(j);
            for (l, a_row) in a.iter().enumerate() {
                let pt = self.spec.stage_point(j, l);
                for &t in &self.tanks {
                    jac[(row, self.level_index(t, pt).unwrap())] += 1.0;
                    jac[(row, self.level_index(t, start).unwrap())] -= 1.0;
                    for (mi, &a_lm) in a_row.iter().enumerate() {
                        let sp = self.spec.stage_point(j, mi);
                        let w = dt * a_lm;
                        let own = self.level_index(t, sp).unwrap();
                        jac[(row, own)] += w * m.outflow_coef(t) * smooth_sqrt_d1(x[own]);
                        if let Some(u) = TankModel::upstream_of(t) {
                            if let Some(ui) = self.level_index(u, sp) {
                                jac[(row, ui)] -= w * m.feed_coef(t, u) * smooth_sqrt_d1(x[ui]);
                            }
                        }
                        for &p in &self.pumps {
                            jac[(row, self.input_index(p, j).unwrap())] -= w * m.pump_coef(t, p);
                        }
                    }
                    row += 1;
                }
            }
        }
        jac
    }

    fn eq_hessian(&self, x: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let a = self.spec.discretization.tableau();
        let dt = self.spec.dt;
        let m = &self.model;
        let mut row = self.tanks.len();
        for j in 0..self.spec.horizon {
            for a_row in a.iter() {
                for &t in &self.tanks {
                    let wr = w[row];
                    for (mi, &a_lm) in a_row.iter().enumerate() {
                        let sp = self.spec.stage_point(j, mi);
                        let c = wr * dt * a_lm;
                        let own = self.level_index(t, sp).unwrap();
                        h[(own, own)] += c * m.outflow_coef(t) * smooth_sqrt_d2(x[own]);
                        if let Some(u) = TankModel::upstream_of(t) {
                            if let Some(ui) = self.level_index(u, sp) {
                                h[(ui, ui)] -= c * m.feed_coef(t, u) * smooth_sqrt_d2(x[ui]);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Some(h)
    }

    fn interior_point(&self) -> Option<DVector<f64>> {
        Some(self.warm.clone())
    }

    fn lower_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Integrates the transcribed dynamics of all four tanks forward under the
/// given inputs (one per interval), solving each interval's stage equations
/// by Newton's method.
pub fn simulate_transcribed(
    model: &TankModel,
    spec: &OcpSpec,
    h0: &Vector4<f64>,
    inputs: &[Vector2<f64>],
) -> Trajectory {
    assert_eq!(inputs.len(), spec.horizon, "one input per interval");
    let a = spec.discretization.tableau();
    let s = a.len();
    let mut levels = vec![*h0];
    let mut start = *h0;
    for v in inputs {
        // unknown: stage levels stacked, initial guess = start
        let mut k = DVector::from_iterator(4 * s, (0..s).flat_map(|_| start.iter().copied()));
        for _ in 0..50 {
            let stage = |k: &DVector<f64>, l: usize| {
                Vector4::new(k[4 * l], k[4 * l + 1], k[4 * l + 2], k[4 * l + 3])
            };
            let mut res = DVector::zeros(4 * s);
            let mut jac = DMatrix::identity(4 * s, 4 * s);
            for l in 0..s {
                let mut r = stage(&k, l) - start;
                for m in 0..s {
                    let hm = stage(&k, m);
                    r -= model.rhs_unchecked(&hm, v) * (spec.dt * a[l][m]);
                    let jm = model.state_jacobian(&hm) * (spec.dt * a[l][m]);
                    let mut blk = jac.view_mut((4 * l, 4 * m), (4, 4));
                    blk -= jm;
                }
                res.rows_mut(4 * l, 4).copy_from(&r);
            }
            if res.amax() < 1e-13 {
                break;
            }
            let Some(step) = jac.lu().solve(&res) else {
                break;
            };
            k -= step;
            // keep levels in the smoothed region
            k.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        for l in 0..s {
            levels.push(Vector4::new(
                k[4 * l],
                k[4 * l + 1],
                k[4 * l + 2],
                k[4 * l + 3],
            ));
        }
        start = *levels.last().unwrap();
    }
    Trajectory {
        levels,
        inputs: inputs.to_vec(),
    }
}
