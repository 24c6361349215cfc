//! Digraph decomposition and the stacked coupling `A x + B xbar + z = 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::StructuralError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub usize);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Directed edge `parent -> child`: the child's model reads a piece of the
/// parent's variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiEdge {
    pub parent: AgentId,
    pub child: AgentId,
}

impl DiEdge {
    pub fn new(parent: usize, child: usize) -> Self {
        Self {
            parent: AgentId(parent),
            child: AgentId(child),
        }
    }
}

impl fmt::Display for DiEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}->{})", self.parent, self.child)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Digraph {
    nodes: Vec<AgentId>,
    edges: Vec<DiEdge>,
}

impl Digraph {
    pub fn new(
        nodes: impl IntoIterator<Item = AgentId>,
        edges: impl IntoIterator<Item = DiEdge>,
    ) -> Result<Self, StructuralError> {
        let mut seen = BTreeSet::new();
        let mut node_list = Vec::new();
        for n in nodes {
            if !seen.insert(n) {
                return Err(StructuralError::DuplicateAgent(n));
            }
            node_list.push(n);
        }
        let mut edge_set = BTreeSet::new();
        let mut edge_list = Vec::new();
        for e in edges {
            if e.parent == e.child {
                return Err(StructuralError::SelfLoop(e.parent));
            }
            if !seen.contains(&e.parent) || !seen.contains(&e.child) {
                return Err(StructuralError::UnknownEndpoint(e));
            }
            if !edge_set.insert(e) {
                return Err(StructuralError::DuplicateEdge(e));
            }
            edge_list.push(e);
        }
        node_list.sort();
        Ok(Self {
            nodes: node_list,
            edges: edge_list,
        })
    }

    pub fn nodes(&self) -> &[AgentId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[DiEdge] {
        &self.edges
    }

    pub fn parents(&self, i: AgentId) -> impl Iterator<Item = AgentId> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.child == i)
            .map(|e| e.parent)
    }

    pub fn children(&self, j: AgentId) -> impl Iterator<Item = AgentId> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.parent == j)
            .map(|e| e.child)
    }
}

/// One agent-to-edge incidence of the bipartite graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Link {
    pub agent: AgentId,
    /// Index into [`BipartiteStructure::edges`].
    pub edge: usize,
}

/// Agents and digraph edges as the two node classes.
#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteStructure {
    pub agents: Vec<AgentId>,
    /// Edge nodes sorted by (parent, child).
    pub edges: Vec<DiEdge>,
    /// Links sorted by (agent id, edge index).
    pub links: Vec<Link>,
}

impl BipartiteStructure {
    pub fn agent_index(&self, id: AgentId) -> Option<usize> {
        self.agents.binary_search(&id).ok()
    }

    pub fn edge_index(&self, e: DiEdge) -> Option<usize> {
        self.edges.binary_search(&e).ok()
    }

    /// The two links touching edge node `e`, parent side first.
    pub fn edge_links(&self, e: usize) -> [usize; 2] {
        let edge = self.edges[e];
        let find = |a: AgentId| {
            self.links
                .iter()
                .position(|l| l.agent == a && l.edge == e)
                .expect("bipartite structure is complete")
        };
        [find(edge.parent), find(edge.child)]
    }
}

pub fn build_bipartite(digraph: &Digraph) -> Result<BipartiteStructure, StructuralError> {
    let mut edges = digraph.edges().to_vec();
    edges.sort();
    for w in edges.windows(2) {
        if w[0] == w[1] {
            return Err(StructuralError::DuplicateEdge(w[0]));
        }
    }
    let mut links = Vec::with_capacity(2 * edges.len());
    for (idx, e) in edges.iter().enumerate() {
        links.push(Link {
            agent: e.parent,
            edge: idx,
        });
        links.push(Link {
            agent: e.child,
            edge: idx,
        });
    }
    links.sort();
    Ok(BipartiteStructure {
        agents: digraph.nodes().to_vec(),
        edges,
        links,
    })
}

/// 0/1 matrix picking the overlap entries out of an agent's variable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMatrix {
    m: DMatrix<f64>,
}

impl SelectorMatrix {
    pub fn from_indices(cols: usize, picks: &[usize]) -> Self {
        let mut m = DMatrix::zeros(picks.len(), cols);
        for (r, &c) in picks.iter().enumerate() {
            m[(r, c)] = 1.0;
        }
        Self { m }
    }

    /// Unchecked; see [`SelectorMatrix::defect`].
    pub fn from_dense(m: DMatrix<f64>) -> Self {
        Self { m }
    }

    pub fn rows(&self) -> usize {
        self.m.nrows()
    }

    pub fn cols(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Describes the first row that is not a single unit entry.
    pub fn defect(&self) -> Option<String> {
        for r in 0..self.m.nrows() {
            let row = self.m.row(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let nonzero = row.iter().filter(|&&v| v != 0.0).count();
            if ones != 1 || nonzero != 1 {
                return Some(format!(
                    "row {r} has {nonzero} nonzero entries ({ones} unit), expected exactly one unit entry"
                ));
            }
        }
        None
    }

    /// Column picked by each row, if the matrix is a valid selector.
    pub fn picks(&self) -> Option<Vec<usize>> {
        if self.defect().is_some() {
            return None;
        }
        Some(
            (0..self.m.nrows())
                .map(|r| self.m.row(r).iter().position(|&v| v == 1.0).unwrap())
                .collect(),
        )
    }
}

/// Stacked coupling matrices and their block partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedCoupling {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub links: Vec<Link>,
    /// Row range of each link in A, B, z and y.
    pub link_rows: Vec<Range<usize>>,
    /// Column range of each agent in A.
    pub agent_cols: Vec<Range<usize>>,
    /// Column range of each edge node in B.
    pub edge_cols: Vec<Range<usize>>,
    /// Variable indices picked by each link's selector.
    pub link_picks: Vec<Vec<usize>>,
    /// Link indices incident to each agent, in canonical order.
    pub agent_links: Vec<Vec<usize>>,
    /// The two links of each edge node, parent side first.
    pub edge_links: Vec<[usize; 2]>,
}

impl StackedCoupling {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_x(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_xbar(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_agents(&self) -> usize {
        self.agent_cols.len()
    }

    /// Rows of agent `i` across all its links, concatenated in link order.
    pub fn agent_rows(&self, i: usize) -> Vec<usize> {
        self.agent_links[i]
            .iter()
            .flat_map(|&l| self.link_rows[l].clone())
            .collect()
    }

    /// Agent-local variable indices matching [`StackedCoupling::agent_rows`].
    pub fn agent_picks(&self, i: usize) -> Vec<usize> {
        self.agent_links[i]
            .iter()
            .flat_map(|&l| self.link_picks[l].iter().copied())
            .collect()
    }

    pub fn stack_x(&self, parts: &[DVector<f64>]) -> DVector<f64> {
        let mut x = DVector::zeros(self.num_x());
        for (i, p) in parts.iter().enumerate() {
            x.rows_mut(self.agent_cols[i].start, p.len()).copy_from(p);
        }
        x
    }

    /// Largest entry of |BᵀB − 2I|.
    pub fn btb_defect(&self) -> f64 {
        let btb = self.b.transpose() * &self.b;
        let n = btb.nrows();
        (btb - DMatrix::identity(n, n) * 2.0).amax()
    }
}

pub type SelectorMap = BTreeMap<(AgentId, DiEdge), SelectorMatrix>;

pub fn assemble_coupling(
    bip: &BipartiteStructure,
    selectors: &SelectorMap,
    agent_dims: &[usize],
) -> Result<StackedCoupling, StructuralError> {
    if agent_dims.len() != bip.agents.len() {
        return Err(StructuralError::Invalid(format!(
            "{} agent dimensions for {} agents",
            agent_dims.len(),
            bip.agents.len()
        )));
    }
    let mut agent_cols = Vec::with_capacity(agent_dims.len());
    let mut off = 0;
    for &d in agent_dims {
        agent_cols.push(off..off + d);
        off += d;
    }
    let nx = off;

    let mut picks = Vec::with_capacity(bip.links.len());
    for l in &bip.links {
        let edge = bip.edges[l.edge];
        let sel = selectors
            .get(&(l.agent, edge))
            .ok_or(StructuralError::MissingSelector {
                agent: l.agent,
                edge,
            })?;
        let ai = bip
            .agent_index(l.agent)
            .ok_or(StructuralError::UnknownEndpoint(edge))?;
        if sel.cols() != agent_dims[ai] {
            return Err(StructuralError::BadSelector {
                agent: l.agent,
                edge,
                detail: format!(
                    "{} columns but agent has {} variables",
                    sel.cols(),
                    agent_dims[ai]
                ),
            });
        }
        let p = sel.picks().ok_or_else(|| StructuralError::BadSelector {
            agent: l.agent,
            edge,
            detail: sel.defect().unwrap_or_default(),
        })?;
        picks.push(p);
    }

    let mut edge_cols = Vec::with_capacity(bip.edges.len());
    let mut edge_links = Vec::with_capacity(bip.edges.len());
    let mut off = 0;
    for (e, edge) in bip.edges.iter().enumerate() {
        let pair = bip.edge_links(e);
        let (pr, cr) = (picks[pair[0]].len(), picks[pair[1]].len());
        if pr != cr {
            return Err(StructuralError::OverlapMismatch {
                edge: *edge,
                parent_rows: pr,
                child_rows: cr,
            });
        }
        edge_cols.push(off..off + pr);
        edge_links.push(pair);
        off += pr;
    }
    let nxbar = off;

    let mut link_rows = Vec::with_capacity(bip.links.len());
    let mut off = 0;
    for p in &picks {
        link_rows.push(off..off + p.len());
        off += p.len();
    }
    let nrows = off;

    let mut a = DMatrix::zeros(nrows, nx);
    let mut b = DMatrix::zeros(nrows, nxbar);
    let mut agent_links = vec![Vec::new(); bip.agents.len()];
    for (li, l) in bip.links.iter().enumerate() {
        let ai = bip.agent_index(l.agent).unwrap();
        agent_links[ai].push(li);
        let rows = link_rows[li].clone();
        for (k, r) in rows.clone().enumerate() {
            a[(r, agent_cols[ai].start + picks[li][k])] = 1.0;
            b[(r, edge_cols[l.edge].start + k)] = -1.0;
        }
    }

    let coupling = StackedCoupling {
        a,
        b,
        links: bip.links.clone(),
        link_rows,
        agent_cols,
        edge_cols,
        link_picks: picks,
        agent_links,
        edge_links,
    };
    let defect = coupling.btb_defect();
    if defect > 1e-14 {
        return Err(StructuralError::CouplingDefect(defect));
    }
    Ok(coupling)
}

/// Smooth local problem of one agent: minimize `f(x)` subject to
/// `ineq(x) <= 0` and `eq(x) = 0`.
///
/// Dense Jacobians have one row per constraint. Hessian hooks may return
/// `None`, in which case the local solver falls back to quasi-Newton updates.
pub trait AgentSubproblem: Send + Sync {
    fn dim(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn num_eq(&self) -> usize;

    fn objective(&self, x: &DVector<f64>) -> f64;
    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn objective_hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn ineq(&self, x: &DVector<f64>) -> DVector<f64>;
    fn ineq_jac(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `sum_c w_c * hess(ineq_c)`.
    fn ineq_hessian(&self, _x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn eq(&self, x: &DVector<f64>) -> DVector<f64>;
    fn eq_jac(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `sum_c w_c * hess(eq_c)`.
    fn eq_hessian(&self, _x: &DVector<f64>, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// A point with every inequality strictly negative; also the default
    /// starting point of a solve.
    fn interior_point(&self) -> Option<DVector<f64>>;

    /// Declared lower bound of `f` on the feasible set.
    fn lower_bound(&self) -> Option<f64>;
}

/// Agents, digraph and selectors. Immutable once built; cheap to clone.
#[derive(Clone)]
pub struct DistributedProblem {
    pub digraph: Digraph,
    pub bipartite: BipartiteStructure,
    /// Aligned with `bipartite.agents`.
    pub agents: Vec<Arc<dyn AgentSubproblem>>,
    pub selectors: SelectorMap,
}

impl fmt::Debug for DistributedProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistributedProblem")
            .field("digraph", &self.digraph)
            .field(
                "dims",
                &self.agents.iter().map(|a| a.dim()).collect::<Vec<_>>(),
            )
            .finish()
    }
}

/// Problem declaration defect found by [`validate_problem`].
#[derive(Clone, Debug, PartialEq)]
pub enum Diagnostic {
    NoInteriorPoint {
        agent: AgentId,
    },
    InteriorPointNotStrict {
        agent: AgentId,
        worst: f64,
    },
    InteriorPointWrongDim {
        agent: AgentId,
    },
    NoLowerBound {
        agent: AgentId,
    },
    MissingSelector {
        agent: AgentId,
        edge: DiEdge,
    },
    Selector {
        agent: AgentId,
        edge: DiEdge,
        detail: String,
    },
    OverlapMismatch {
        edge: DiEdge,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NoInteriorPoint { agent } => write!(
                f,
                "agent {agent}: inequalities declared but no strictly feasible point given (barrier needs a nonempty interior)"
            ),
            Diagnostic::InteriorPointNotStrict { agent, worst } => write!(
                f,
                "agent {agent}: declared interior point violates strict feasibility (max inequality {worst:e})"
            ),
            Diagnostic::InteriorPointWrongDim { agent } => {
                write!(f, "agent {agent}: declared interior point has the wrong dimension")
            }
            Diagnostic::NoLowerBound { agent } => {
                write!(f, "agent {agent}: objective has no declared lower bound")
            }
            Diagnostic::MissingSelector { agent, edge } => {
                write!(f, "agent {agent} on edge {edge}: missing selector")
            }
            Diagnostic::Selector { agent, edge, detail } => {
                write!(f, "agent {agent} on edge {edge}: {detail}")
            }
            Diagnostic::OverlapMismatch { edge } => {
                write!(f, "edge {edge}: parent and child selectors have different row counts")
            }
        }
    }
}

impl DistributedProblem {
    /// `agents` may be given in any order; they are aligned with the sorted
    /// agent ids.
    pub fn new(
        digraph: Digraph,
        agents: Vec<(AgentId, Arc<dyn AgentSubproblem>)>,
        selectors: SelectorMap,
    ) -> Result<Self, StructuralError> {
        let bipartite = build_bipartite(&digraph)?;
        let mut by_id: BTreeMap<AgentId, Arc<dyn AgentSubproblem>> = BTreeMap::new();
        for (id, a) in agents {
            if by_id.insert(id, a).is_some() {
                return Err(StructuralError::DuplicateAgent(id));
            }
        }
        let mut aligned = Vec::with_capacity(bipartite.agents.len());
        for id in &bipartite.agents {
            aligned.push(by_id.remove(id).ok_or(StructuralError::MissingAgent(*id))?);
        }
        if let Some((id, _)) = by_id.into_iter().next() {
            return Err(StructuralError::Invalid(format!(
                "agent {id} is not a digraph node"
            )));
        }
        Ok(Self {
            digraph,
            bipartite,
            agents: aligned,
            selectors,
        })
    }

    pub fn agent_dims(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.dim()).collect()
    }

    pub fn assemble(&self) -> Result<StackedCoupling, StructuralError> {
        assemble_coupling(&self.bipartite, &self.selectors, &self.agent_dims())
    }

    /// Sum of declared lower bounds (`None` if any agent lacks one).
    pub fn objective_lower_bound(&self) -> Option<f64> {
        self.agents.iter().map(|a| a.lower_bound()).sum()
    }
}

/// Pure check of the declarations the solver relies on.
pub fn validate_problem(p: &DistributedProblem) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for (id, agent) in p.bipartite.agents.iter().zip(&p.agents) {
        let agent_id = *id;
        match agent.interior_point() {
            None if agent.num_ineq() > 0 => {
                out.push(Diagnostic::NoInteriorPoint { agent: agent_id })
            }
            None => {}
            Some(x) if x.len() != agent.dim() => {
                out.push(Diagnostic::InteriorPointWrongDim { agent: agent_id })
            }
            Some(x) if agent.num_ineq() > 0 => {
                let worst = agent.ineq(&x).max();
                if !(worst < 0.0) {
                    out.push(Diagnostic::InteriorPointNotStrict {
                        agent: agent_id,
                        worst,
                    });
                }
            }
            Some(_) => {}
        }
        if agent.lower_bound().is_none() {
            out.push(Diagnostic::NoLowerBound { agent: agent_id });
        }
    }
    let dims = p.agent_dims();
    for l in &p.bipartite.links {
        let edge = p.bipartite.edges[l.edge];
        match p.selectors.get(&(l.agent, edge)) {
            None => out.push(Diagnostic::MissingSelector {
                agent: l.agent,
                edge,
            }),
            Some(sel) => {
                let ai = p.bipartite.agent_index(l.agent).unwrap();
                if sel.cols() != dims[ai] {
                    out.push(Diagnostic::Selector {
                        agent: l.agent,
                        edge,
                        detail: format!("{} columns, agent has {} variables", sel.cols(), dims[ai]),
                    });
                }
                if let Some(d) = sel.defect() {
                    out.push(Diagnostic::Selector {
                        agent: l.agent,
                        edge,
                        detail: d,
                    });
                }
            }
        }
    }
    for edge in &p.bipartite.edges {
        let rows = |a: AgentId| p.selectors.get(&(a, *edge)).map(|s| s.rows());
        if let (Some(r1), Some(r2)) = (rows(edge.parent), rows(edge.child)) {
            if r1 != r2 {
                out.push(Diagnostic::OverlapMismatch { edge: *edge });
            }
        }
    }
    out
}
