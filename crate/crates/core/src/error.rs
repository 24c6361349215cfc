use thiserror::Error;

use crate::graph::{AgentId, DiEdge};

/// Malformed problem structure.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum StructuralError {
    #[error("self-loop on agent {0}")]
    SelfLoop(AgentId),
    #[error("duplicate edge {0}")]
    DuplicateEdge(DiEdge),
    #[error("duplicate agent id {0}")]
    DuplicateAgent(AgentId),
    #[error("edge {0} references an undeclared agent")]
    UnknownEndpoint(DiEdge),
    #[error("no agent subproblem registered for {0}")]
    MissingAgent(AgentId),
    #[error("no selector for agent {agent} on edge {edge}")]
    MissingSelector { agent: AgentId, edge: DiEdge },
    #[error("selector for agent {agent} on edge {edge}: {detail}")]
    BadSelector {
        agent: AgentId,
        edge: DiEdge,
        detail: String,
    },
    #[error(
        "overlap on edge {edge} has {parent_rows} rows at the parent but {child_rows} at the child"
    )]
    OverlapMismatch {
        edge: DiEdge,
        parent_rows: usize,
        child_rows: usize,
    },
    #[error("coupling check failed: B^T B deviates from 2I by {0:e}")]
    CouplingDefect(f64),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Evaluation outside the domain of a barrier or model function.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("domain error: {0}")]
pub struct DomainError(pub String);

/// Failure of a full distributed solve.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Structural(#[from] StructuralError),
    #[error("problem failed validation: {0:?}")]
    Invalid(Vec<String>),
    #[error("agent {agent}: {source}")]
    Nlp {
        agent: AgentId,
        #[source]
        source: crate::nlp::NlpError,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("outer iteration cap of {cap} reached without certificate")]
    OuterCapExceeded {
        cap: usize,
        partial: Box<crate::driver::Solution>,
    },
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad parameters: {0}")]
    Params(String),
}
