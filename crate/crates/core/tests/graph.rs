use std::sync::Arc;

use ellada_core::graph::{
    build_bipartite, validate_problem, AgentId, AgentSubproblem, DiEdge, Diagnostic, Digraph,
    DistributedProblem, SelectorMap, SelectorMatrix,
};
use ellada_core::testkit;
use ellada_core::StructuralError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn ids(n: usize) -> impl Iterator<Item = AgentId> {
    (1..=n).map(AgentId)
}

#[test]
fn triangle_has_three_edge_nodes_and_six_links() {
    let g = Digraph::new(
        ids(3),
        [DiEdge::new(1, 2), DiEdge::new(2, 3), DiEdge::new(3, 1)],
    )
    .unwrap();
    let bip = build_bipartite(&g).unwrap();
    assert_eq!(bip.agents.len(), 3);
    assert_eq!(bip.edges.len(), 3);
    assert_eq!(bip.links.len(), 6);
    for e in 0..3 {
        let [p, c] = bip.edge_links(e);
        assert_eq!(bip.links[p].agent, bip.edges[e].parent);
        assert_eq!(bip.links[c].agent, bip.edges[e].child);
    }
}

#[test]
fn edgeless_digraph_has_agent_nodes_only() {
    let bip = build_bipartite(&Digraph::new(ids(4), []).unwrap()).unwrap();
    assert_eq!(bip.agents.len(), 4);
    assert!(bip.edges.is_empty() && bip.links.is_empty());
}

#[test]
fn single_edge_links_both_endpoints() {
    let e = DiEdge::new(1, 2);
    let bip = build_bipartite(&Digraph::new(ids(2), [e]).unwrap()).unwrap();
    let touching: Vec<AgentId> = bip.links.iter().map(|l| l.agent).collect();
    assert_eq!(touching, vec![AgentId(1), AgentId(2)]);
    assert_eq!(bip.edges, vec![e]);
}

#[test]
fn malformed_digraphs_are_rejected() {
    assert!(matches!(
        Digraph::new(ids(2), [DiEdge::new(1, 2), DiEdge::new(1, 2)]),
        Err(StructuralError::DuplicateEdge(_))
    ));
    assert!(matches!(
        Digraph::new(ids(2), [DiEdge::new(1, 1)]),
        Err(StructuralError::SelfLoop(_))
    ));
    assert!(matches!(
        Digraph::new(ids(2), [DiEdge::new(1, 7)]),
        Err(StructuralError::UnknownEndpoint(_))
    ));
}

fn scalar_pair(selector_1: SelectorMatrix) -> DistributedProblem {
    let e = DiEdge::new(1, 2);
    let mut sel = SelectorMap::new();
    sel.insert((AgentId(1), e), selector_1);
    sel.insert((AgentId(2), e), SelectorMatrix::from_indices(3, &[0]));
    let mut rng = testkit::rng(0);
    let agents = vec![
        (
            AgentId(1),
            Arc::new(testkit::random_agent(&mut rng, 2)) as Arc<dyn AgentSubproblem>,
        ),
        (
            AgentId(2),
            Arc::new(testkit::random_agent(&mut rng, 3)) as Arc<dyn AgentSubproblem>,
        ),
    ];
    DistributedProblem::new(Digraph::new(ids(2), [e]).unwrap(), agents, sel).unwrap()
}

#[test]
fn smallest_coupling() {
    let p = scalar_pair(SelectorMatrix::from_indices(2, &[1]));
    let c = p.assemble().unwrap();
    assert_eq!((c.a.nrows(), c.a.ncols()), (2, 5));
    let mut expected = DMatrix::zeros(2, 5);
    expected[(0, 1)] = 1.0;
    expected[(1, 2)] = 1.0;
    assert_eq!(c.a, expected);
    assert_eq!(c.b, DMatrix::from_column_slice(2, 1, &[-1.0, -1.0]));
    assert_eq!((c.b.transpose() * &c.b)[(0, 0)], 2.0);
    assert!(validate_problem(&p).is_empty());
}

#[test]
fn bad_selectors_are_diagnosed_and_refused() {
    let two_entries = SelectorMatrix::from_dense(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
    let p = scalar_pair(two_entries);
    let diags = validate_problem(&p);
    let e = DiEdge::new(1, 2);
    assert!(
        diags.iter().any(|d| matches!(d, Diagnostic::Selector { agent, edge, .. } if *agent == AgentId(1) && *edge == e)),
        "{diags:?}"
    );
    assert!(matches!(
        p.assemble(),
        Err(StructuralError::BadSelector { .. })
    ));

    let wrong_width = scalar_pair(SelectorMatrix::from_indices(4, &[0]));
    assert!(matches!(
        wrong_width.assemble(),
        Err(StructuralError::BadSelector { .. })
    ));

    let e = DiEdge::new(1, 2);
    let mut sel = SelectorMap::new();
    sel.insert((AgentId(1), e), SelectorMatrix::from_indices(2, &[0, 1]));
    sel.insert((AgentId(2), e), SelectorMatrix::from_indices(3, &[0]));
    let mut rng = testkit::rng(1);
    let agents = vec![
        (
            AgentId(1),
            Arc::new(testkit::random_agent(&mut rng, 2)) as Arc<dyn AgentSubproblem>,
        ),
        (
            AgentId(2),
            Arc::new(testkit::random_agent(&mut rng, 3)) as Arc<dyn AgentSubproblem>,
        ),
    ];
    let p = DistributedProblem::new(Digraph::new(ids(2), [e]).unwrap(), agents, sel).unwrap();
    assert!(validate_problem(&p).contains(&Diagnostic::OverlapMismatch { edge: e }));
    assert!(matches!(
        p.assemble(),
        Err(StructuralError::OverlapMismatch { .. })
    ));
}

#[test]
fn missing_interior_point_is_diagnosed() {
    let mut rng = testkit::rng(2);
    let mut agent = testkit::random_agent(&mut rng, 2);
    agent.interior = None;
    let mut unbounded = testkit::random_agent(&mut rng, 2);
    unbounded.lower = None;
    let mut outside = testkit::random_agent(&mut rng, 2);
    outside.interior = Some(DVector::from_element(2, 100.0));
    let agents = vec![
        (AgentId(1), Arc::new(agent) as Arc<dyn AgentSubproblem>),
        (AgentId(2), Arc::new(unbounded) as Arc<dyn AgentSubproblem>),
        (AgentId(3), Arc::new(outside) as Arc<dyn AgentSubproblem>),
    ];
    let p = DistributedProblem::new(
        Digraph::new(ids(3), []).unwrap(),
        agents,
        SelectorMap::new(),
    )
    .unwrap();
    let diags = validate_problem(&p);
    assert!(diags.contains(&Diagnostic::NoInteriorPoint { agent: AgentId(1) }));
    assert!(diags.contains(&Diagnostic::NoLowerBound { agent: AgentId(2) }));
    assert!(diags.iter().any(
        |d| matches!(d, Diagnostic::InteriorPointNotStrict { agent, .. } if *agent == AgentId(3))
    ));
    assert!(diags[0].to_string().contains("strictly feasible"));
}

#[test]
fn empty_coupling_has_no_rows() {
    let p = testkit::random_problem(3, 3, 0);
    let c = p.assemble().unwrap();
    assert_eq!(c.rows(), 0);
    assert_eq!(c.num_xbar(), 0);
    assert_eq!(c.num_x(), p.agent_dims().iter().sum::<usize>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assembled_couplings_are_sound(seed in any::<u64>(), agents in 2usize..6, edges in 0usize..10) {
        let p = testkit::random_problem(seed, agents, edges);
        let c = p.assemble().unwrap();
        prop_assert_eq!(c.btb_defect(), 0.0);
        prop_assert_eq!(&c, &p.assemble().unwrap());

        // consensus points satisfy A x + B xbar = 0 with xbar read off either endpoint
        let mut rng = testkit::rng(seed ^ 0x5eed);
        let mut x: Vec<DVector<f64>> = p.agent_dims().iter().map(|&n| testkit::random_vec(&mut rng, n, 1.0)).collect();
        for (e, edge) in p.bipartite.edges.iter().enumerate() {
            let [lp, lc] = c.edge_links[e];
            let (ip, ic) = (p.bipartite.agent_index(edge.parent).unwrap(), p.bipartite.agent_index(edge.child).unwrap());
            for k in 0..c.edge_cols[e].len() {
                x[ic][c.link_picks[lc][k]] = x[ip][c.link_picks[lp][k]];
            }
        }
        // an agent can be the child of several edges; only accept instances
        // where the copy above left every edge consistent
        let consistent = p.bipartite.edges.iter().enumerate().all(|(e, edge)| {
            let [lp, lc] = c.edge_links[e];
            let (ip, ic) = (p.bipartite.agent_index(edge.parent).unwrap(), p.bipartite.agent_index(edge.child).unwrap());
            (0..c.edge_cols[e].len()).all(|k| x[ic][c.link_picks[lc][k]] == x[ip][c.link_picks[lp][k]])
        });
        prop_assume!(consistent);
        let xs = c.stack_x(&x);
        let mut xbar = DVector::zeros(c.num_xbar());
        for (e, edge) in p.bipartite.edges.iter().enumerate() {
            let [lp, _] = c.edge_links[e];
            let ip = p.bipartite.agent_index(edge.parent).unwrap();
            for k in 0..c.edge_cols[e].len() {
                xbar[c.edge_cols[e].start + k] = x[ip][c.link_picks[lp][k]];
            }
        }
        let residual = &c.a * &xs + &c.b * &xbar;
        prop_assert_eq!(residual.amax(), 0.0);

        // conversely, A x + B xbar = 0 forces each pair of selected copies to agree
        for (e, _) in p.bipartite.edges.iter().enumerate() {
            let [lp, lc] = c.edge_links[e];
            let rp = c.link_rows[lp].clone();
            let rc = c.link_rows[lc].clone();
            let ax = &c.a * &xs;
            for (a, b) in rp.zip(rc) {
                prop_assert_eq!(ax[a], ax[b]);
            }
        }
    }
}
