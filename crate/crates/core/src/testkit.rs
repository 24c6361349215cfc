//! Seeded random instances shared by the integration suites and the
//! acceptance runs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    AgentId, AgentSubproblem, DiEdge, Digraph, DistributedProblem, SelectorMap, SelectorMatrix,
};
use crate::quadratic::QuadraticAgent;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Strongly convex box-constrained QP agent of dimension `n`.
pub fn random_agent(rng: &mut ChaCha8Rng, n: usize) -> QuadraticAgent {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = &m * m.transpose() + DMatrix::identity(n, n);
    let q = random_vec(rng, n, 1.0);
    let mut g = DMatrix::zeros(2 * n, n);
    for j in 0..n {
        g[(2 * j, j)] = 1.0;
        g[(2 * j + 1, j)] = -1.0;
    }
    let lower = QuadraticAgent::unconstrained_minimum(&p, &q);
    QuadraticAgent {
        p,
        q,
        g,
        h: DVector::from_element(2 * n, 5.0),
        e: DMatrix::zeros(0, n),
        d: DVector::zeros(0),
        interior: Some(DVector::zeros(n)),
        lower,
    }
}

/// Random digraph on `agents` nodes with random selectors of random width.
pub fn random_problem(seed: u64, agents: usize, max_edges: usize) -> DistributedProblem {
    let mut rng = rng(seed);
    let dims: Vec<usize> = (0..agents).map(|_| rng.random_range(2..6)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..agents)
        .flat_map(|i| (0..agents).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(max_edges.min(pairs.len()));
    let edges: Vec<DiEdge> = pairs.iter().map(|&(p, c)| DiEdge::new(p, c)).collect();
    let mut selectors = SelectorMap::new();
    for e in &edges {
        let width = rng.random_range(1..=dims[e.parent.0].min(dims[e.child.0]));
        for a in [e.parent, e.child] {
            let mut cols: Vec<usize> = (0..dims[a.0]).collect();
            cols.shuffle(&mut rng);
            cols.truncate(width);
            selectors.insert((a, *e), SelectorMatrix::from_indices(dims[a.0], &cols));
        }
    }
    let list = (0..agents)
        .map(|i| {
            (
                AgentId(i),
                Arc::new(random_agent(&mut rng, dims[i])) as Arc<dyn AgentSubproblem>,
            )
        })
        .collect();
    DistributedProblem::new(
        Digraph::new((0..agents).map(AgentId), edges).unwrap(),
        list,
        selectors,
    )
    .unwrap()
}

/// `f(x) = sum a_i x_i^4 / 4 + 1/2 x'Px + q'x + sum c_i cos(x_i)` (nonconvex
/// for large `c`), inside a ball and a box, with linear and quadratic
/// equalities shifted so that `start` is feasible.
pub struct SmoothAgent {
    quartic: DVector<f64>,
    p: DMatrix<f64>,
    q: DVector<f64>,
    wave: DVector<f64>,
    radius_sq: f64,
    bound: f64,
    lin: DMatrix<f64>,
    lin_rhs: DVector<f64>,
    /// `x' Q x + g'x = r` per entry.
    quad: Vec<(DMatrix<f64>, DVector<f64>, f64)>,
    start: DVector<f64>,
    exact_hessians: bool,
}

impl SmoothAgent {
    /// `feasible_start = false` pins the equality constants to a perturbed
    /// point, so the declared start violates them.
    pub fn random(rng: &mut ChaCha8Rng, feasible_start: bool) -> Self {
        let n = rng.random_range(2..7);
        let m_lin = rng.random_range(0..n.min(3));
        let m_quad = rng.random_range(0..2usize).min(n - 1 - m_lin.min(n - 1));
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let start = random_vec(rng, n, 0.8);
        let lin = DMatrix::from_fn(m_lin, n, |_, _| rng.random_range(-1.0..1.0));
        let quad: Vec<_> = (0..m_quad)
            .map(|_| {
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
                (&a + a.transpose(), random_vec(rng, n, 1.0), 0.0)
            })
            .collect();
        let mut agent = Self {
            quartic: DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0)),
            p: &m * m.transpose() * 0.5,
            q: random_vec(rng, n, 2.0),
            wave: random_vec(rng, n, 1.5),
            radius_sq: 9.0,
            bound: 2.5,
            lin_rhs: DVector::zeros(m_lin),
            lin,
            quad,
            start,
            exact_hessians: rng.random_bool(0.8),
        };
        // pin the constants to the start, or to a nearby point for an infeasible start
        let anchor = if feasible_start {
            agent.start.clone()
        } else {
            &agent.start + random_vec(rng, n, 0.3)
        };
        agent.lin_rhs = &agent.lin * &anchor;
        for c in &mut agent.quad {
            c.2 = anchor.dot(&(&c.0 * &anchor)) + c.1.dot(&anchor);
        }
        agent
    }
}

impl SmoothAgent {
    pub fn start(&self) -> &DVector<f64> {
        &self.start
    }
}

impl AgentSubproblem for SmoothAgent {
    fn dim(&self) -> usize {
        self.q.len()
    }
    fn num_ineq(&self) -> usize {
        1 + 2 * self.dim()
    }
    fn num_eq(&self) -> usize {
        self.lin.nrows() + self.quad.len()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        (0..x.len())
            .map(|i| 0.25 * self.quartic[i] * x[i].powi(4) + self.wave[i] * x[i].cos())
            .sum::<f64>()
            + 0.5 * x.dot(&(&self.p * x))
            + self.q.dot(x)
    }
    fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            self.quartic[i] * x[i].powi(3) - self.wave[i] * x[i].sin()
        }) + &self.p * x
            + &self.q
    }
    fn objective_hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        if !self.exact_hessians {
            return None;
        }
        let diag = DVector::from_fn(x.len(), |i, _| {
            3.0 * self.quartic[i] * x[i].powi(2) - self.wave[i] * x[i].cos()
        });
        Some(&self.p + DMatrix::from_diagonal(&diag))
    }
    fn ineq(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let mut phi = DVector::zeros(1 + 2 * n);
        phi[0] = x.norm_squared() - self.radius_sq;
        for i in 0..n {
            phi[1 + 2 * i] = x[i] - self.bound;
            phi[2 + 2 * i] = -x[i] - self.bound;
        }
        phi
    }
    fn ineq_jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(1 + 2 * n, n);
        j.row_mut(0).copy_from(&(x * 2.0).transpose());
        for i in 0..n {
            j[(1 + 2 * i, i)] = 1.0;
            j[(2 + 2 * i, i)] = -1.0;
        }
        j
    }
    fn ineq_hessian(&self, x: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.exact_hessians
            .then(|| DMatrix::identity(x.len(), x.len()) * (2.0 * w[0]))
    }
    fn eq(&self, x: &DVector<f64>) -> DVector<f64> {
        let lin = &self.lin * x - &self.lin_rhs;
        DVector::from_iterator(
            self.num_eq(),
            lin.iter().copied().chain(
                self.quad
                    .iter()
                    .map(|(q, g, r)| x.dot(&(q * x)) + g.dot(x) - r),
            ),
        )
    }
    fn eq_jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let mut j = DMatrix::zeros(self.num_eq(), n);
        j.rows_mut(0, self.lin.nrows()).copy_from(&self.lin);
        for (k, (q, g, _)) in self.quad.iter().enumerate() {
            j.row_mut(self.lin.nrows() + k)
                .copy_from(&(q * x * 2.0 + g).transpose());
        }
        j
    }
    fn eq_hessian(&self, x: &DVector<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        if !self.exact_hessians {
            return None;
        }
        let mut h = DMatrix::zeros(x.len(), x.len());
        for (k, (q, _, _)) in self.quad.iter().enumerate() {
            h += q * (2.0 * w[self.lin.nrows() + k]);
        }
        Some(h)
    }
    fn interior_point(&self) -> Option<DVector<f64>> {
        Some(self.start.clone())
    }
    fn lower_bound(&self) -> Option<f64> {
        None
    }
}
