//! Splitting the plant into two subsystems on a two-node digraph.

use std::sync::Arc;

use nalgebra::{DVector, Vector4};

use ellada_core::graph::{
    AgentId, AgentSubproblem, DiEdge, Digraph, DistributedProblem, SelectorMap, SelectorMatrix,
};

use crate::model::TankModel;
use crate::ocp::{OcpError, OcpSpec, TankOcp, Trajectory, Upstream};

/// One subsystem: owned tanks, its pump and the upstream tank it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subsystem {
    pub id: AgentId,
    pub tanks: [usize; 2],
    pub pump: usize,
    pub upstream: usize,
}

/// Tanks 1 and 4 with pump 1 read tank 3; tanks 2 and 3 with pump 2 read tank 4.
pub const SUBSYSTEMS: [Subsystem; 2] = [
    Subsystem {
        id: AgentId(1),
        tanks: [0, 3],
        pump: 0,
        upstream: 2,
    },
    Subsystem {
        id: AgentId(2),
        tanks: [1, 2],
        pump: 1,
        upstream: 3,
    },
];

fn owner_of(tank: usize) -> &'static Subsystem {
    SUBSYSTEMS
        .iter()
        .find(|s| s.tanks.contains(&tank))
        .expect("every tank has an owner")
}

/// Upstream handling of a subsystem subproblem.
#[derive(Clone, Debug, PartialEq)]
pub enum UpstreamMode {
    /// Copies coupled to the owner (the distributed problem).
    Coupled,
    /// Frozen at the given trajectory of the upstream tank.
    Frozen(Vec<f64>),
}

pub fn subsystem_ocp(
    model: &TankModel,
    spec: &OcpSpec,
    sub: &Subsystem,
    h_now: &Vector4<f64>,
    warm: &Trajectory,
    mode: UpstreamMode,
) -> Result<TankOcp, OcpError> {
    let upstream = match mode {
        UpstreamMode::Coupled => Upstream::Copy,
        UpstreamMode::Frozen(v) => Upstream::Frozen(v),
    };
    TankOcp::new(
        *model,
        spec.clone(),
        sub.tanks.to_vec(),
        vec![sub.pump],
        vec![(sub.upstream, upstream)],
        sub.tanks.iter().map(|&t| h_now[t]).collect(),
        warm,
    )
}

pub fn centralized_ocp(
    model: &TankModel,
    spec: &OcpSpec,
    h_now: &Vector4<f64>,
    warm: &Trajectory,
) -> Result<TankOcp, OcpError> {
    TankOcp::new(
        *model,
        spec.clone(),
        vec![0, 1, 2, 3],
        vec![0, 1],
        Vec::new(),
        h_now.iter().copied().collect(),
        warm,
    )
}

/// The distributed problem and the subsystem subproblems, aligned with the
/// problem's agent order.
pub struct TankDecomposition {
    pub problem: DistributedProblem,
    pub agents: Vec<Arc<TankOcp>>,
}

impl TankDecomposition {
    /// Starting points of the agents (their warm starts).
    pub fn initial_points(&self) -> Vec<DVector<f64>> {
        self.agents
            .iter()
            .map(|a| a.interior_point().unwrap())
            .collect()
    }

    /// First inputs `(v1, v2)` from agent solutions.
    pub fn first_inputs(&self, x: &[DVector<f64>]) -> [f64; 2] {
        let mut v = [0.0; 2];
        for (sub, (agent, xi)) in SUBSYSTEMS.iter().zip(self.agents.iter().zip(x)) {
            v[sub.pump] = agent.inputs_of(xi, sub.pump)[0];
        }
        v
    }

    /// Full trajectory assembled from the owners' variables.
    pub fn trajectory(&self, x: &[DVector<f64>]) -> Trajectory {
        let spec = self.agents[0].spec();
        let mut levels = vec![Vector4::zeros(); spec.points()];
        let mut inputs = vec![nalgebra::Vector2::zeros(); spec.horizon];
        for (sub, (agent, xi)) in SUBSYSTEMS.iter().zip(self.agents.iter().zip(x)) {
            for &t in &sub.tanks {
                for (pt, v) in agent.levels_of(xi, t).into_iter().enumerate() {
                    levels[pt][t] = v;
                }
            }
            for (j, v) in agent.inputs_of(xi, sub.pump).into_iter().enumerate() {
                inputs[j][sub.pump] = v;
            }
        }
        Trajectory { levels, inputs }
    }
}

/// Coupled subsystem problems; edge `owner -> reader` carries the reader's
/// upstream tank over every transcription point.
pub fn build_distributed(
    model: &TankModel,
    spec: &OcpSpec,
    h_now: &Vector4<f64>,
    warm: &Trajectory,
) -> Result<TankDecomposition, DecompositionError> {
    let agents: Vec<Arc<TankOcp>> = SUBSYSTEMS
        .iter()
        .map(|s| subsystem_ocp(model, spec, s, h_now, warm, UpstreamMode::Coupled).map(Arc::new))
        .collect::<Result<_, _>>()?;
    let mut edges = Vec::new();
    let mut selectors = SelectorMap::new();
    for (reader, ocp) in SUBSYSTEMS.iter().zip(&agents) {
        let owner = owner_of(reader.upstream);
        let owner_ocp = &agents[SUBSYSTEMS.iter().position(|s| s.id == owner.id).unwrap()];
        let edge = DiEdge::new(owner.id.0, reader.id.0);
        let pick = |o: &TankOcp| -> Vec<usize> {
            (0..spec.points())
                .map(|pt| o.level_index(reader.upstream, pt).unwrap())
                .collect()
        };
        selectors.insert(
            (reader.id, edge),
            SelectorMatrix::from_indices(ocp.dim(), &pick(ocp)),
        );
        selectors.insert(
            (owner.id, edge),
            SelectorMatrix::from_indices(owner_ocp.dim(), &pick(owner_ocp)),
        );
        edges.push(edge);
    }
    let digraph = Digraph::new(SUBSYSTEMS.iter().map(|s| s.id), edges)?;
    let list = SUBSYSTEMS
        .iter()
        .zip(&agents)
        .map(|(s, a)| (s.id, a.clone() as Arc<dyn AgentSubproblem>))
        .collect();
    let problem = DistributedProblem::new(digraph, list, selectors)?;
    Ok(TankDecomposition { problem, agents })
}

#[derive(Debug, thiserror::Error)]
pub enum DecompositionError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Structure(#[from] ellada_core::StructuralError),
}
