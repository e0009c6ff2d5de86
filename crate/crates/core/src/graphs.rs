//! Time-varying directed communication topologies.
//!
//! Agents are indexed `0..n` internally. Every agent always hears itself, so
//! self-loops are implicit and never stored; the mixing layer adds the
//! diagonal. The serialized form uses 1-based agent ids.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one agent")]
    NoAgents,
    #[error("edge ({from}, {to}) references an agent outside 1..={n}")]
    EndpointOutOfRange { from: usize, to: usize, n: usize },
    #[error("edge ({0}, {0}) is an explicit self-loop; self-loops are implicit")]
    SelfLoop(usize),
    #[error("duplicate edge ({from}, {to})")]
    DuplicateEdge { from: usize, to: usize },
    #[error("slice {index} has {found} agents, sequence has {expected}")]
    AgentCountMismatch { index: usize, found: usize, expected: usize },
    #[error("period {period} does not match the {slices} stored slices")]
    PeriodMismatch { period: usize, slices: usize },
    #[error("B0 must be at least 1")]
    ZeroWindow,
    #[error("sequence needs at least one slice")]
    EmptySchedule,
    #[error("edge probability {0} is outside (0, 1]")]
    BadProbability(f64),
    #[error("no B0-connected random sequence found after {attempts} draws (n = {n}, p = {p}, B0 = {b0})")]
    RetryBudgetExhausted { attempts: usize, n: usize, p: f64, b0: usize },
    #[error("sequence is defined by a function and cannot be serialized")]
    NotSerializable,
}

/// A directed graph over `n_agents` agents. `(j, i)` means "j sends to i".
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Digraph {
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Digraph {
    /// Builds a graph from 0-based `(from, to)` pairs.
    pub fn new(n_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if n_agents == 0 {
            return Err(GraphError::NoAgents);
        }
        let mut set = BTreeSet::new();
        for (from, to) in edges {
            if from >= n_agents || to >= n_agents {
                return Err(GraphError::EndpointOutOfRange { from: from + 1, to: to + 1, n: n_agents });
            }
            if from == to {
                return Err(GraphError::SelfLoop(from + 1));
            }
            if !set.insert((from, to)) {
                return Err(GraphError::DuplicateEdge { from: from + 1, to: to + 1 });
            }
        }
        Ok(Self { n_agents, edges: set })
    }

    /// Builds a graph from 1-based `(from, to)` pairs, as used in config documents.
    pub fn from_one_based(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n_agents == 0 {
            return Err(GraphError::NoAgents);
        }
        let mut zero_based = Vec::with_capacity(edges.len());
        for &(from, to) in edges {
            if from == 0 || to == 0 || from > n_agents || to > n_agents {
                return Err(GraphError::EndpointOutOfRange { from, to, n: n_agents });
            }
            zero_based.push((from - 1, to - 1));
        }
        Self::new(n_agents, zero_based)
    }

    pub fn empty(n_agents: usize) -> Result<Self, GraphError> {
        Self::new(n_agents, std::iter::empty())
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Out-degree excluding the implicit self-loop.
    pub fn out_degree(&self, j: usize) -> usize {
        self.edges.range((j, 0)..(j + 1, 0)).count()
    }

    pub fn out_neighbors(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.range((j, 0)..(j + 1, 0)).map(|&(_, to)| to)
    }

    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |&&(_, to)| to == i).map(|&(from, _)| from)
    }

    /// Edges as 1-based pairs, sorted.
    pub fn one_based_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(f, t)| (f + 1, t + 1)).collect()
    }

    /// Undirected version: `{i, j}` present in both directions whenever either
    /// direction is present.
    pub fn symmetrized(&self) -> Digraph {
        let mut edges = self.edges.clone();
        for &(f, t) in &self.edges {
            edges.insert((t, f));
        }
        Digraph { n_agents: self.n_agents, edges }
    }

    fn union_with(&mut self, other: &Digraph) {
        debug_assert_eq!(self.n_agents, other.n_agents);
        self.edges.extend(other.edges.iter().copied());
    }

    fn reachable_from(&self, start: usize, reverse: bool) -> Vec<bool> {
        let mut adj = vec![Vec::new(); self.n_agents];
        for &(f, t) in &self.edges {
            if reverse {
                adj[t].push(f);
            } else {
                adj[f].push(t);
            }
        }
        let mut seen = vec![false; self.n_agents];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }
}

impl fmt::Display for Digraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digraph(n={}; ", self.n_agents)?;
        let parts: Vec<String> = self.one_based_edges().iter().map(|(a, b)| format!("{a}->{b}")).collect();
        write!(f, "{})", parts.join(", "))
    }
}

/// True iff every ordered pair of distinct agents is joined by a directed path.
pub fn is_strongly_connected(g: &Digraph) -> bool {
    if g.n_agents() <= 1 {
        return true;
    }
    g.reachable_from(0, false).iter().all(|&r| r) && g.reachable_from(0, true).iter().all(|&r| r)
}

type ScheduleFn = Arc<dyn Fn(usize) -> Digraph + Send + Sync>;

#[derive(Clone)]
enum Schedule {
    Periodic(Vec<Digraph>),
    Function(ScheduleFn),
}

/// Deterministic map from iteration index to a directed graph.
#[derive(Clone)]
pub struct GraphSequence {
    n_agents: usize,
    claimed_b0: usize,
    schedule: Schedule,
}

impl fmt::Debug for GraphSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("GraphSequence");
        d.field("n_agents", &self.n_agents).field("claimed_b0", &self.claimed_b0);
        match &self.schedule {
            Schedule::Periodic(slices) => d.field("slices", slices),
            Schedule::Function(_) => d.field("schedule", &"<fn>"),
        };
        d.finish()
    }
}

impl GraphSequence {
    /// A schedule that cycles through `slices`, so `graph_at(k) = slices[k mod len]`.
    pub fn periodic(slices: Vec<Digraph>, claimed_b0: usize) -> Result<Self, GraphError> {
        let first = slices.first().ok_or(GraphError::EmptySchedule)?;
        if claimed_b0 == 0 {
            return Err(GraphError::ZeroWindow);
        }
        let n_agents = first.n_agents();
        for (index, g) in slices.iter().enumerate() {
            if g.n_agents() != n_agents {
                return Err(GraphError::AgentCountMismatch { index, found: g.n_agents(), expected: n_agents });
            }
        }
        Ok(Self { n_agents, claimed_b0, schedule: Schedule::Periodic(slices) })
    }

    /// An arbitrary (possibly aperiodic) schedule. The closure must return a graph
    /// with `n_agents` agents for every `k` and be deterministic.
    pub fn from_fn(
        n_agents: usize,
        claimed_b0: usize,
        f: impl Fn(usize) -> Digraph + Send + Sync + 'static,
    ) -> Result<Self, GraphError> {
        if n_agents == 0 {
            return Err(GraphError::NoAgents);
        }
        if claimed_b0 == 0 {
            return Err(GraphError::ZeroWindow);
        }
        Ok(Self { n_agents, claimed_b0, schedule: Schedule::Function(Arc::new(f)) })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn claimed_b0(&self) -> usize {
        self.claimed_b0
    }

    pub fn period(&self) -> Option<usize> {
        match &self.schedule {
            Schedule::Periodic(slices) => Some(slices.len()),
            Schedule::Function(_) => None,
        }
    }

    pub fn graph_at(&self, k: usize) -> Digraph {
        match &self.schedule {
            Schedule::Periodic(slices) => slices[k % slices.len()].clone(),
            Schedule::Function(f) => {
                let g = f(k);
                assert_eq!(g.n_agents(), self.n_agents, "schedule returned a graph of the wrong size at k = {k}");
                g
            }
        }
    }

    pub fn slices(&self) -> Option<&[Digraph]> {
        match &self.schedule {
            Schedule::Periodic(slices) => Some(slices),
            Schedule::Function(_) => None,
        }
    }

    pub fn to_document(&self) -> Result<SequenceDocument, GraphError> {
        let slices = self.slices().ok_or(GraphError::NotSerializable)?;
        Ok(SequenceDocument {
            n_agents: self.n_agents,
            claimed_b0: self.claimed_b0,
            period: Some(slices.len()),
            slices: slices.iter().map(Digraph::one_based_edges).collect(),
        })
    }

    pub fn from_document(doc: &SequenceDocument) -> Result<Self, GraphError> {
        if let Some(period) = doc.period {
            if period != doc.slices.len() {
                return Err(GraphError::PeriodMismatch { period, slices: doc.slices.len() });
            }
        }
        let slices = doc
            .slices
            .iter()
            .map(|edges| Digraph::from_one_based(doc.n_agents, edges))
            .collect::<Result<Vec<_>, _>>()?;
        Self::periodic(slices, doc.claimed_b0)
    }
}

/// Serialized form of a periodic sequence; edges are 1-based `[from, to]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDocument {
    pub n_agents: usize,
    pub claimed_b0: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    pub slices: Vec<Vec<(usize, usize)>>,
}

/// Union of the edge sets of `seq` over iterations `k*b0 ..= (k+1)*b0 - 1`.
pub fn union_graph(seq: &GraphSequence, k: usize, b0: usize) -> Digraph {
    let mut out = Digraph { n_agents: seq.n_agents(), edges: BTreeSet::new() };
    for s in k * b0..(k + 1) * b0 {
        out.union_with(&seq.graph_at(s));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerificationMode {
    /// Every distinct window of a periodic schedule was checked.
    Exact,
    /// Only windows ending before the horizon were checked.
    FiniteHorizon,
}

impl fmt::Display for VerificationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerificationMode::Exact => f.write_str("exact"),
            VerificationMode::FiniteHorizon => f.write_str("finite-horizon verified"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConnectivityReport {
    pub b0: usize,
    pub horizon: usize,
    pub windows_checked: usize,
    pub first_failing_window: Option<usize>,
    pub mode: VerificationMode,
}

impl ConnectivityReport {
    pub fn holds(&self) -> bool {
        self.first_failing_window.is_none()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Checks every window `k` with `(k+1)*b0 - 1 < horizon`.
///
/// For a periodic schedule the window pattern repeats every `lcm(period, b0)`
/// iterations, so the result is exact once the horizon covers that many.
pub fn verify_b0_connectivity(seq: &GraphSequence, b0: usize, horizon: usize) -> ConnectivityReport {
    assert!(b0 >= 1, "B0 must be positive");
    let windows = horizon / b0;
    let mut first_failing_window = None;
    for k in 0..windows {
        if !is_strongly_connected(&union_graph(seq, k, b0)) {
            first_failing_window = Some(k);
            break;
        }
    }
    let mode = match seq.period() {
        Some(p) if windows * b0 >= p / gcd(p, b0) * b0 => VerificationMode::Exact,
        _ => VerificationMode::FiniteHorizon,
    };
    ConnectivityReport { b0, horizon, windows_checked: windows, first_failing_window, mode }
}

/// Static directed cycle `1 -> 2 -> ... -> n -> 1`.
pub fn make_ring(n: usize) -> Result<GraphSequence, GraphError> {
    let edges: Vec<(usize, usize)> = if n < 2 { Vec::new() } else { (0..n).map(|j| (j, (j + 1) % n)).collect() };
    GraphSequence::periodic(vec![Digraph::new(n, edges)?], 1)
}

/// Splits a strongly connected base graph (a seeded random cycle plus a few
/// random chords) into `b0` slices that are cycled periodically.
///
/// Cycle edges are dealt round-robin, so with `2 <= b0` no single slice
/// contains the whole cycle. Chords are kept only if no slice becomes strongly
/// connected on its own.
pub fn make_periodic_partition(n: usize, b0: usize, seed: u64) -> Result<GraphSequence, GraphError> {
    if n == 0 {
        return Err(GraphError::NoAgents);
    }
    if b0 == 0 {
        return Err(GraphError::ZeroWindow);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let cycle: Vec<(usize, usize)> =
        if n < 2 { Vec::new() } else { (0..n).map(|i| (order[i], order[(i + 1) % n])).collect() };

    let mut dealt = cycle.clone();
    dealt.shuffle(&mut rng);
    let mut base_slices: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); b0];
    for (i, e) in dealt.into_iter().enumerate() {
        base_slices[i % b0].insert(e);
    }

    let chord_pool: Vec<(usize, usize)> =
        (0..n).flat_map(|f| (0..n).map(move |t| (f, t))).filter(|&(f, t)| f != t && !cycle.contains(&(f, t))).collect();

    const CHORD_ATTEMPTS: usize = 64;
    for _ in 0..CHORD_ATTEMPTS {
        let mut slices = base_slices.clone();
        for &chord in &chord_pool {
            if rng.random_bool(0.2) {
                let target = rng.random_range(0..b0);
                slices[target].insert(chord);
            }
        }
        let graphs = to_graphs(n, &slices)?;
        if b0 < 2 || !graphs.iter().any(is_strongly_connected) {
            return GraphSequence::periodic(graphs, b0);
        }
    }
    GraphSequence::periodic(to_graphs(n, &base_slices)?, b0)
}

fn to_graphs(n: usize, slices: &[BTreeSet<(usize, usize)>]) -> Result<Vec<Digraph>, GraphError> {
    slices.iter().map(|s| Digraph::new(n, s.iter().copied())).collect()
}

/// Draws `b0` independent Erdos-Renyi digraphs (one per slot of a period of
/// length `b0`), redrawing the whole period until its union is strongly
/// connected.
pub fn make_random_sequence(
    n: usize,
    edge_probability: f64,
    b0: usize,
    retry_budget: usize,
    seed: u64,
) -> Result<GraphSequence, GraphError> {
    if n == 0 {
        return Err(GraphError::NoAgents);
    }
    if b0 == 0 {
        return Err(GraphError::ZeroWindow);
    }
    if !(edge_probability > 0.0 && edge_probability <= 1.0) {
        return Err(GraphError::BadProbability(edge_probability));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..retry_budget.max(1) {
        let mut slices = Vec::with_capacity(b0);
        for _ in 0..b0 {
            let mut edges = Vec::new();
            for f in 0..n {
                for t in 0..n {
                    if f != t && rng.random_bool(edge_probability) {
                        edges.push((f, t));
                    }
                }
            }
            slices.push(Digraph::new(n, edges)?);
        }
        let seq = GraphSequence::periodic(slices, b0)?;
        if verify_b0_connectivity(&seq, b0, b0).holds() {
            return Ok(seq);
        }
    }
    Err(GraphError::RetryBudgetExhausted { attempts: retry_budget.max(1), n, p: edge_probability, b0 })
}
