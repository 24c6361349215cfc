//! Convex quadratic agents: the generated benchmark and the JSON problem file.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::StructuralError;
use crate::graph::{
    AgentId, AgentSubproblem, DiEdge, Digraph, DistributedProblem, SelectorMap, SelectorMatrix,
};

/// `f(x) = 1/2 x'Px + q'x` subject to `Gx <= h` and `Ex = d`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticAgent {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub e: DMatrix<f64>,
    pub d: DVector<f64>,
    pub interior: Option<DVector<f64>>,
    pub lower: Option<f64>,
}

impl QuadraticAgent {
    /// Lower bound from the unconstrained minimum when `P` is positive definite.
    pub fn unconstrained_minimum(p: &DMatrix<f64>, q: &DVector<f64>) -> Option<f64> {
        let chol = p.clone().cholesky()?;
        Some(-0.5 * q.dot(&chol.solve(q)))
    }
}

impl AgentSubproblem for QuadraticAgent {
    fn dim(&self) -> usize {
        self.q.len()
    }
    fn num_ineq(&self) -> usize {
        self.h.len()
    }
    fn num_eq(&self) -> usize {
        self.d.len()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }
    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * x + &self.q
    }
    fn objective_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.p.clone())
    }
    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g * x - &self.h
    }
    fn ineq_jac(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.g.clone()
    }
    fn ineq_hessian(&self, x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }
    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.e * x - &self.d
    }
    fn eq_jac(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.e.clone()
    }
    fn eq_hessian(&self, x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(x.len(), x.len()))
    }
    fn interior_point(&self) -> Option<DVector<f64>> {
        self.interior.clone()
    }
    fn lower_bound(&self) -> Option<f64> {
        self.lower
    }
}

/// Row-major dense matrix in a problem file.
type Rows = Vec<Vec<f64>>;

fn matrix(rows: &Rows, cols: usize, what: &str) -> Result<DMatrix<f64>, StructuralError> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(StructuralError::Invalid(format!(
            "{what}: every row needs {cols} entries"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticAgentSpec {
    pub id: usize,
    pub p: Rows,
    pub q: Vec<f64>,
    #[serde(default)]
    pub g: Rows,
    #[serde(default)]
    pub h: Vec<f64>,
    #[serde(default)]
    pub e: Rows,
    #[serde(default)]
    pub d: Vec<f64>,
    #[serde(default)]
    pub interior: Option<Vec<f64>>,
    /// Taken from the unconstrained minimum when omitted.
    #[serde(default)]
    pub lower_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorSpec {
    pub agent: usize,
    pub edge: [usize; 2],
    /// Agent variable picked by each overlap row.
    pub indices: Vec<usize>,
}

/// Problem file layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticProblemSpec {
    pub agents: Vec<QuadraticAgentSpec>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub selectors: Vec<SelectorSpec>,
}

impl QuadraticProblemSpec {
    pub fn build(&self) -> Result<DistributedProblem, StructuralError> {
        let mut agents: Vec<(AgentId, Arc<dyn AgentSubproblem>)> = Vec::new();
        let mut dims = BTreeMap::new();
        for a in &self.agents {
            let n = a.q.len();
            let p = matrix(&a.p, n, "p")?;
            if p.nrows() != n {
                return Err(StructuralError::Invalid(format!(
                    "agent {}: p must be {n}x{n}",
                    a.id
                )));
            }
            let g = matrix(&a.g, n, "g")?;
            let e = matrix(&a.e, n, "e")?;
            if g.nrows() != a.h.len() || e.nrows() != a.d.len() {
                return Err(StructuralError::Invalid(format!(
                    "agent {}: constraint rows and right-hand sides differ in length",
                    a.id
                )));
            }
            let q = DVector::from_vec(a.q.clone());
            let lower = a
                .lower_bound
                .or_else(|| QuadraticAgent::unconstrained_minimum(&p, &q));
            dims.insert(a.id, n);
            agents.push((
                AgentId(a.id),
                Arc::new(QuadraticAgent {
                    p,
                    q,
                    g,
                    h: DVector::from_vec(a.h.clone()),
                    e,
                    d: DVector::from_vec(a.d.clone()),
                    interior: a.interior.clone().map(DVector::from_vec),
                    lower,
                }),
            ));
        }
        let nodes: Vec<AgentId> = self.agents.iter().map(|a| AgentId(a.id)).collect();
        let edges: Vec<DiEdge> = self
            .edges
            .iter()
            .map(|[p, c]| DiEdge::new(*p, *c))
            .collect();
        let digraph = Digraph::new(nodes, edges)?;
        let mut selectors = SelectorMap::new();
        for s in &self.selectors {
            let edge = DiEdge::new(s.edge[0], s.edge[1]);
            let cols = *dims
                .get(&s.agent)
                .ok_or(StructuralError::UnknownEndpoint(edge))?;
            if let Some(bad) = s.indices.iter().find(|&&i| i >= cols) {
                return Err(StructuralError::BadSelector {
                    agent: AgentId(s.agent),
                    edge,
                    detail: format!("index {bad} outside the agent's {cols} variables"),
                });
            }
            selectors.insert(
                (AgentId(s.agent), edge),
                SelectorMatrix::from_indices(cols, &s.indices),
            );
        }
        DistributedProblem::new(digraph, agents, selectors)
    }
}

/// Parameters of [`generated_qp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratedQp {
    pub agents: usize,
    pub dim: usize,
    /// Variables shared between consecutive agents of the chain.
    pub overlap: usize,
    /// Box `|x_i| <= bound` on every variable.
    pub bound: f64,
    /// Adds one random equality per agent.
    pub equalities: bool,
}

impl Default for GeneratedQp {
    fn default() -> Self {
        Self {
            agents: 4,
            dim: 6,
            overlap: 2,
            bound: 10.0,
            equalities: true,
        }
    }
}

/// Agents of [`generated_qp`], in chain order.
pub fn generated_qp_agents(
    cfg: &GeneratedQp,
    seed: u64,
) -> Result<Vec<QuadraticAgent>, StructuralError> {
    if cfg.agents == 0 || cfg.dim == 0 || 2 * cfg.overlap > cfg.dim || !(cfg.bound > 0.0) {
        return Err(StructuralError::Invalid(
            "generated QP needs agents >= 1, dim >= 2 * overlap and a positive bound".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.dim;
    let mut agents = Vec::with_capacity(cfg.agents);
    for _ in 0..cfg.agents {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = &m * m.transpose() + DMatrix::identity(n, n);
        let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let mut g = DMatrix::zeros(2 * n, n);
        for j in 0..n {
            g[(2 * j, j)] = 1.0;
            g[(2 * j + 1, j)] = -1.0;
        }
        let h = DVector::from_element(2 * n, cfg.bound);
        let (e, d) = if cfg.equalities {
            let row = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
            let d = DVector::from_element(1, rng.random_range(-0.5..0.5));
            (row, d)
        } else {
            (DMatrix::zeros(0, n), DVector::zeros(0))
        };
        let lower = QuadraticAgent::unconstrained_minimum(&p, &q);
        agents.push(QuadraticAgent {
            p,
            q,
            g,
            h,
            e,
            d,
            interior: Some(DVector::zeros(n)),
            lower,
        });
    }
    Ok(agents)
}

/// Chain of strongly convex QP agents; the last `overlap` variables of agent
/// `i` must equal the first `overlap` of agent `i + 1`.
pub fn generated_qp(cfg: &GeneratedQp, seed: u64) -> Result<DistributedProblem, StructuralError> {
    chain_problem(generated_qp_agents(cfg, seed)?, cfg.overlap)
}

/// Chains equally sized agents through `overlap` shared variables.
pub fn chain_problem(
    agents: Vec<QuadraticAgent>,
    overlap: usize,
) -> Result<DistributedProblem, StructuralError> {
    let count = agents.len();
    let n = agents.first().map_or(0, |a| a.dim());
    if agents.iter().any(|a| a.dim() != n) || overlap > n {
        return Err(StructuralError::Invalid(
            "chained agents need equal dimensions".into(),
        ));
    }
    let agents: Vec<(AgentId, Arc<dyn AgentSubproblem>)> = agents
        .into_iter()
        .enumerate()
        .map(|(i, a)| (AgentId(i), Arc::new(a) as Arc<dyn AgentSubproblem>))
        .collect();
    let nodes: Vec<AgentId> = (0..count).map(AgentId).collect();
    let edges: Vec<DiEdge> = (1..count).map(|i| DiEdge::new(i - 1, i)).collect();
    let mut selectors = SelectorMap::new();
    let tail: Vec<usize> = (n - overlap..n).collect();
    let head: Vec<usize> = (0..overlap).collect();
    for e in &edges {
        selectors.insert((e.parent, *e), SelectorMatrix::from_indices(n, &tail));
        selectors.insert((e.child, *e), SelectorMatrix::from_indices(n, &head));
    }
    DistributedProblem::new(Digraph::new(nodes, edges)?, agents, selectors)
}
