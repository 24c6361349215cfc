//! Coordinator-agent execution. Agents own their variables and see only the
//! edge-local offsets `-x_bar_e + z_ie + y_ie / rho` of their incident links.

pub mod wire;

use std::io::{BufReader, BufWriter};
use std::net::{Ipv4Addr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::coordinator::{average_kernel, oracle_kernel, y_kernel, z_kernel, OuterState};
use crate::error::SolveError;
use crate::graph::{AgentSubproblem, DistributedProblem, StackedCoupling};
use crate::nlp::{self, AgentEquality, BarrierObjective, NlpOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Wave {
    Plain,
    /// Candidate evaluation for acceleration; never moves the agent's state.
    Trial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveRequest {
    pub wave: Wave,
    pub rho: f64,
    pub barrier: f64,
    pub eps4: f64,
    pub eps5: f64,
    /// One vector per incident link, in canonical link order.
    pub offsets: Vec<DVector<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ToAgent {
    Init { x: DVector<f64> },
    Solve(SolveRequest),
    Snapshot,
    Shutdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentReport {
    pub wave: Wave,
    /// `D_ie x_i` per incident link.
    pub blocks: Vec<DVector<f64>>,
    pub d4: f64,
    pub d5: f64,
    /// `f_i(x_i)`.
    pub objective: f64,
    /// `sum ln(-phi_c(x_i))`.
    pub log_barrier: f64,
    pub iterations: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FromAgent {
    Report(AgentReport),
    State(DVector<f64>),
    Closed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExecutionMode {
    #[default]
    Synchronous,
    /// Odd-indexed agents refresh only every `staleness + 1` rounds.
    BoundedAsync { staleness: usize },
}

impl ExecutionMode {
    pub fn refreshes(&self, agent: usize, round: usize) -> bool {
        match *self {
            ExecutionMode::Synchronous => true,
            ExecutionMode::BoundedAsync { staleness } => {
                let delay = if agent % 2 == 1 { staleness } else { 0 };
                round.is_multiple_of(delay + 1)
            }
        }
    }

    pub fn all_fresh(&self, agents: usize, round: usize) -> bool {
        (0..agents).all(|i| self.refreshes(i, round))
    }
}

impl std::str::FromStr for ExecutionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "sync" {
            return Ok(ExecutionMode::Synchronous);
        }
        if let Some(rest) = s.strip_prefix("async:") {
            let staleness = rest
                .parse()
                .map_err(|_| format!("bad staleness '{rest}' in mode '{s}'"))?;
            return Ok(ExecutionMode::BoundedAsync { staleness });
        }
        Err(format!("unknown mode '{s}' (expected sync or async:S)"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransportKind {
    /// Agents run on the coordinator thread.
    #[default]
    Inline,
    /// One worker thread per agent, channel messages.
    Threads,
    /// One worker thread per agent behind a loopback socket. Port 0 picks
    /// free ports; otherwise agent `i` listens on `base_port + i`.
    Tcp { base_port: u16 },
}

/// One agent's response to a solve request, plus its new state for plain
/// waves.
pub fn agent_step(
    agent: &dyn AgentSubproblem,
    link_picks: &[Vec<usize>],
    req: &SolveRequest,
    x_local: &DVector<f64>,
    opts: &NlpOptions,
) -> (AgentReport, Option<DVector<f64>>) {
    assert_eq!(
        req.offsets.len(),
        link_picks.len(),
        "one offset per incident link"
    );
    let picks: Vec<usize> = link_picks.iter().flatten().copied().collect();
    let offset = DVector::from_iterator(
        picks.len(),
        req.offsets.iter().flat_map(|o| o.iter().copied()),
    );
    let obj = BarrierObjective::new(agent, req.barrier, req.rho, picks, offset);
    let eq = AgentEquality(agent);
    let failed = |msg: String| AgentReport {
        wave: req.wave,
        blocks: Vec::new(),
        d4: f64::NAN,
        d5: f64::NAN,
        objective: f64::NAN,
        log_barrier: f64::NAN,
        iterations: 0,
        failure: Some(msg),
    };
    match nlp::solve_equality_nlp(x_local, &obj, &eq, req.eps4, req.eps5, opts) {
        Ok(res) => {
            let log_barrier = match obj.log_barrier_sum(&res.x) {
                Ok(v) => v,
                Err(e) => return (failed(e.to_string()), None),
            };
            let report = AgentReport {
                wave: req.wave,
                blocks: blocks_of(link_picks, &res.x),
                d4: res.d4_norm,
                d5: res.d5_norm,
                objective: agent.objective(&res.x),
                log_barrier,
                iterations: res.iterations,
                failure: None,
            };
            (report, Some(res.x))
        }
        Err(e) => (failed(e.to_string()), None),
    }
}

fn blocks_of(link_picks: &[Vec<usize>], x: &DVector<f64>) -> Vec<DVector<f64>> {
    link_picks
        .iter()
        .map(|p| DVector::from_iterator(p.len(), p.iter().map(|&i| x[i])))
        .collect()
}

/// Stateful agent endpoint holding `x_i`.
pub struct AgentWorker {
    agent: Arc<dyn AgentSubproblem>,
    link_picks: Vec<Vec<usize>>,
    x: DVector<f64>,
    opts: NlpOptions,
}

impl AgentWorker {
    pub fn new(
        agent: Arc<dyn AgentSubproblem>,
        link_picks: Vec<Vec<usize>>,
        opts: NlpOptions,
    ) -> Self {
        let n = agent.dim();
        Self {
            agent,
            link_picks,
            x: DVector::zeros(n),
            opts,
        }
    }

    pub fn handle(&mut self, msg: ToAgent) -> FromAgent {
        match msg {
            ToAgent::Init { x } => {
                self.x = x;
                let log_barrier = nlp::log_barrier_sum(self.agent.as_ref(), &self.x);
                let (log_barrier, failure) = match log_barrier {
                    Ok(v) => (v, None),
                    Err(e) => (f64::NAN, Some(format!("initial point: {e}"))),
                };
                FromAgent::Report(AgentReport {
                    wave: Wave::Plain,
                    blocks: blocks_of(&self.link_picks, &self.x),
                    d4: 0.0,
                    d5: self.agent.eq(&self.x).norm(),
                    objective: self.agent.objective(&self.x),
                    log_barrier,
                    iterations: 0,
                    failure,
                })
            }
            ToAgent::Solve(req) => {
                let (report, x_new) = agent_step(
                    self.agent.as_ref(),
                    &self.link_picks,
                    &req,
                    &self.x,
                    &self.opts,
                );
                if req.wave == Wave::Plain {
                    if let Some(x) = x_new {
                        self.x = x;
                    }
                }
                FromAgent::Report(report)
            }
            ToAgent::Snapshot => FromAgent::State(self.x.clone()),
            ToAgent::Shutdown => FromAgent::Closed,
        }
    }
}

/// Delivers batches of messages and returns the replies in batch order.
pub trait Transport: Send {
    fn exchange(&mut self, batch: Vec<(usize, ToAgent)>) -> Result<Vec<FromAgent>, String>;
    fn shutdown(&mut self) {}
}

pub struct InlineTransport {
    workers: Vec<AgentWorker>,
}

impl Transport for InlineTransport {
    fn exchange(&mut self, batch: Vec<(usize, ToAgent)>) -> Result<Vec<FromAgent>, String> {
        Ok(batch
            .into_iter()
            .map(|(i, m)| self.workers[i].handle(m))
            .collect())
    }
}

pub struct ThreadTransport {
    senders: Vec<Sender<ToAgent>>,
    receivers: Vec<Receiver<FromAgent>>,
    handles: Vec<JoinHandle<()>>,
}

impl ThreadTransport {
    fn new(workers: Vec<AgentWorker>) -> Self {
        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut handles = Vec::new();
        for (i, mut w) in workers.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel::<ToAgent>();
            let (rtx, rrx) = mpsc::channel::<FromAgent>();
            let h = std::thread::Builder::new()
                .name(format!("agent-{i}"))
                .spawn(move || {
                    while let Ok(msg) = rx.recv() {
                        let stop = msg == ToAgent::Shutdown;
                        if rtx.send(w.handle(msg)).is_err() || stop {
                            break;
                        }
                    }
                })
                .expect("spawn agent thread");
            senders.push(tx);
            receivers.push(rrx);
            handles.push(h);
        }
        Self {
            senders,
            receivers,
            handles,
        }
    }
}

impl Transport for ThreadTransport {
    fn exchange(&mut self, batch: Vec<(usize, ToAgent)>) -> Result<Vec<FromAgent>, String> {
        let order: Vec<usize> = batch.iter().map(|(i, _)| *i).collect();
        for (i, m) in batch {
            self.senders[i]
                .send(m)
                .map_err(|_| format!("agent {i} worker is gone"))?;
        }
        order
            .into_iter()
            .map(|i| {
                self.receivers[i]
                    .recv()
                    .map_err(|_| format!("agent {i} worker hung up"))
            })
            .collect()
    }

    fn shutdown(&mut self) {
        for (i, tx) in self.senders.iter().enumerate() {
            if tx.send(ToAgent::Shutdown).is_ok() {
                let _ = self.receivers[i].recv();
            }
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

pub struct TcpTransport {
    streams: Vec<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    handles: Vec<JoinHandle<()>>,
}

impl TcpTransport {
    fn new(workers: Vec<AgentWorker>, base_port: u16) -> Result<Self, String> {
        let mut streams = Vec::new();
        let mut handles = Vec::new();
        for (i, mut w) in workers.into_iter().enumerate() {
            let port = if base_port == 0 {
                0
            } else {
                base_port + i as u16
            };
            let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, port))
                .map_err(|e| format!("agent {i}: bind {port}: {e}"))?;
            let addr = listener.local_addr().map_err(|e| e.to_string())?;
            let h = std::thread::Builder::new()
                .name(format!("agent-{i}-tcp"))
                .spawn(move || {
                    let Ok((sock, _)) = listener.accept() else {
                        return;
                    };
                    let _ = sock.set_nodelay(true);
                    let mut rd = BufReader::new(sock.try_clone().expect("clone socket"));
                    let mut wr = BufWriter::new(sock);
                    loop {
                        let Ok(frame) = wire::read_frame(&mut rd) else {
                            return;
                        };
                        let msg = match wire::decode_to_agent(&frame) {
                            Ok(m) => m,
                            Err(_) => return,
                        };
                        let stop = msg == ToAgent::Shutdown;
                        let reply = wire::encode_from_agent(&w.handle(msg));
                        if wire::write_frame(&mut wr, &reply).is_err() || stop {
                            return;
                        }
                    }
                })
                .map_err(|e| e.to_string())?;
            let sock = TcpStream::connect(addr).map_err(|e| format!("agent {i}: connect: {e}"))?;
            sock.set_nodelay(true).map_err(|e| e.to_string())?;
            let rd = BufReader::new(sock.try_clone().map_err(|e| e.to_string())?);
            streams.push((rd, BufWriter::new(sock)));
            handles.push(h);
        }
        Ok(Self { streams, handles })
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, batch: Vec<(usize, ToAgent)>) -> Result<Vec<FromAgent>, String> {
        let order: Vec<usize> = batch.iter().map(|(i, _)| *i).collect();
        for (i, m) in &batch {
            let (_, wr) = &mut self.streams[*i];
            wire::write_frame(wr, &wire::encode_to_agent(m))
                .map_err(|e| format!("agent {i}: {e}"))?;
        }
        order
            .into_iter()
            .map(|i| {
                let (rd, _) = &mut self.streams[i];
                let frame = wire::read_frame(rd).map_err(|e| format!("agent {i}: {e}"))?;
                wire::decode_from_agent(&frame).map_err(|e| format!("agent {i}: {e}"))
            })
            .collect()
    }

    fn shutdown(&mut self) {
        for (rd, wr) in self.streams.iter_mut() {
            if wire::write_frame(wr, &wire::encode_to_agent(&ToAgent::Shutdown)).is_ok() {
                let _ = wire::read_frame(rd);
            }
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Transport plus the bookkeeping the driver needs.
pub struct Runtime {
    transport: Box<dyn Transport>,
    agents: usize,
    pub mode: ExecutionMode,
}

impl Runtime {
    pub fn new(
        problem: &DistributedProblem,
        coupling: &StackedCoupling,
        kind: TransportKind,
        mode: ExecutionMode,
        opts: &NlpOptions,
    ) -> Result<Self, SolveError> {
        let workers: Vec<AgentWorker> = problem
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let picks = coupling.agent_links[i]
                    .iter()
                    .map(|&l| coupling.link_picks[l].clone())
                    .collect();
                AgentWorker::new(a.clone(), picks, opts.clone())
            })
            .collect();
        let agents = workers.len();
        let transport: Box<dyn Transport> = match kind {
            TransportKind::Inline => Box::new(InlineTransport { workers }),
            TransportKind::Threads => Box::new(ThreadTransport::new(workers)),
            TransportKind::Tcp { base_port } => {
                Box::new(TcpTransport::new(workers, base_port).map_err(SolveError::Transport)?)
            }
        };
        Ok(Self {
            transport,
            agents,
            mode,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    fn reports(&mut self, batch: Vec<(usize, ToAgent)>) -> Result<Vec<AgentReport>, SolveError> {
        let replies = self
            .transport
            .exchange(batch)
            .map_err(SolveError::Transport)?;
        replies
            .into_iter()
            .map(|r| match r {
                FromAgent::Report(rep) => Ok(rep),
                other => Err(SolveError::Transport(format!("unexpected reply {other:?}"))),
            })
            .collect()
    }

    /// Loads starting points; reports carry the initial blocks and values.
    pub fn init(&mut self, x0: Vec<DVector<f64>>) -> Result<Vec<AgentReport>, SolveError> {
        assert_eq!(x0.len(), self.agents);
        let batch = x0
            .into_iter()
            .enumerate()
            .map(|(i, x)| (i, ToAgent::Init { x }))
            .collect();
        self.reports(batch)
    }

    /// Sends one request per listed agent; replies follow request order.
    pub fn solve(
        &mut self,
        requests: Vec<(usize, SolveRequest)>,
    ) -> Result<Vec<AgentReport>, SolveError> {
        let batch = requests
            .into_iter()
            .map(|(i, r)| (i, ToAgent::Solve(r)))
            .collect();
        self.reports(batch)
    }

    pub fn snapshot(&mut self) -> Result<Vec<DVector<f64>>, SolveError> {
        let batch = (0..self.agents).map(|i| (i, ToAgent::Snapshot)).collect();
        let replies = self
            .transport
            .exchange(batch)
            .map_err(SolveError::Transport)?;
        replies
            .into_iter()
            .map(|r| match r {
                FromAgent::State(x) => Ok(x),
                other => Err(SolveError::Transport(format!("unexpected reply {other:?}"))),
            })
            .collect()
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.transport.shutdown();
    }
}

/// Edge-local offsets `-x_bar_e + z_ie + y_ie / rho` for agent `i`, one
/// vector per incident link.
pub fn agent_offsets(
    coupling: &StackedCoupling,
    agent: usize,
    x_bar: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    rho: f64,
) -> Vec<DVector<f64>> {
    coupling.agent_links[agent]
        .iter()
        .map(|&l| {
            let rows = coupling.link_rows[l].clone();
            let cols = coupling.edge_cols[coupling.links[l].edge].clone();
            DVector::from_iterator(
                rows.len(),
                rows.zip(cols).map(|(r, c)| -x_bar[c] + z[r] + y[r] / rho),
            )
        })
        .collect()
}

/// Scatters per-link agent blocks into the stacked `A x`.
pub fn scatter_blocks(
    coupling: &StackedCoupling,
    agent: usize,
    blocks: &[DVector<f64>],
    ax: &mut DVector<f64>,
) {
    for (k, &l) in coupling.agent_links[agent].iter().enumerate() {
        let rows = coupling.link_rows[l].clone();
        ax.rows_mut(rows.start, rows.len()).copy_from(&blocks[k]);
    }
}

/// Coordinator sweep computed edge by edge and link by link.
pub fn blockwise_round(
    coupling: &StackedCoupling,
    ax: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    outer: &OuterState,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let rho = outer.rho;
    let mut x_bar = DVector::zeros(coupling.num_xbar());
    for (e, pair) in coupling.edge_links.iter().enumerate() {
        let rp = coupling.link_rows[pair[0]].clone();
        let rc = coupling.link_rows[pair[1]].clone();
        for (k, c) in coupling.edge_cols[e].clone().enumerate() {
            let (p, q) = (rp.start + k, rc.start + k);
            let vp = oracle_kernel(ax[p], z[p], y[p], rho);
            let vc = oracle_kernel(ax[q], z[q], y[q], rho);
            x_bar[c] = average_kernel(vp, vc);
        }
    }
    let mut z_new = DVector::zeros(z.len());
    let mut y_new = DVector::zeros(y.len());
    for (l, link) in coupling.links.iter().enumerate() {
        let cols = coupling.edge_cols[link.edge].clone();
        for (r, c) in coupling.link_rows[l].clone().zip(cols) {
            let s = ax[r] + -x_bar[c];
            z_new[r] = z_kernel(s, y[r], outer.lambda[r], rho, outer.beta);
            y_new[r] = y_kernel(s, z_new[r], y[r], rho);
        }
    }
    (x_bar, z_new, y_new)
}
