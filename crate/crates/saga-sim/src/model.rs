//! Shared domain types: execution graphs, tasks, cache entries, worker state,
//! and the event vocabulary used by the simulator and every policy module.
//!
//! All timestamps are integer microseconds internally; reports convert to ms.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Simulation time in integer microseconds.
pub type Micros = u64;

pub type NodeId = u32;
pub type TaskId = u64;
pub type WorkerId = u32;
pub type TenantId = u32;

pub const MICROS_PER_MS: u64 = 1_000;

pub fn ms_to_us(ms: f64) -> Micros {
    (ms * MICROS_PER_MS as f64).round() as Micros
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / MICROS_PER_MS as f64
}

/// z-score of the 95th percentile of the standard normal.
pub const Z95: f64 = 1.6448536269514722;

/// Tool classes observed in production traces, plus an open extension point.
/// Serializes as its snake_case name so it can key JSON/TOML tables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ToolKind {
    CodeExecution,
    FileOps,
    WebApi,
    Database,
    Other(String),
}

impl Serialize for ToolKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ToolKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "code_execution" => ToolKind::CodeExecution,
            "file_ops" => ToolKind::FileOps,
            "web_api" => ToolKind::WebApi,
            "database" => ToolKind::Database,
            _ => ToolKind::Other(s),
        })
    }
}

impl ToolKind {
    pub const BUILTIN: [ToolKind; 4] = [
        ToolKind::CodeExecution,
        ToolKind::FileOps,
        ToolKind::WebApi,
        ToolKind::Database,
    ];

    pub fn name(&self) -> &str {
        match self {
            ToolKind::CodeExecution => "code_execution",
            ToolKind::FileOps => "file_ops",
            ToolKind::WebApi => "web_api",
            ToolKind::Database => "database",
            ToolKind::Other(s) => s,
        }
    }
}

/// Latency model for one tool class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LatencyDistribution {
    /// Log-normal over milliseconds: `ln(X) ~ N(mu, sigma^2)`.
    LogNormal { mu: f64, sigma: f64 },
    /// Draws uniformly from a fixed, non-empty sample list (ms).
    Empirical { samples_ms: Vec<f64> },
}

impl LatencyDistribution {
    /// Fit a log-normal so that its P50 and P95 match the given values.
    pub fn from_p50_p95(p50_ms: f64, p95_ms: f64) -> Self {
        let mu = p50_ms.ln();
        let sigma = (p95_ms / p50_ms).ln() / Z95;
        LatencyDistribution::LogNormal { mu, sigma }
    }

    /// Fit a log-normal to a mean and P95. Solves mu + sigma^2/2 = ln(mean)
    /// and mu + z95 * sigma = ln(p95) for the smaller sigma root; when the
    /// pair is infeasible (p95 too close to the mean for any log-normal) the
    /// discriminant clamps to zero, matching both moments as closely as a
    /// log-normal can.
    pub fn from_mean_p95(mean_ms: f64, p95_ms: f64) -> Self {
        let gap = (p95_ms / mean_ms).ln();
        let disc = (Z95 * Z95 - 2.0 * gap).max(0.0);
        let sigma = Z95 - disc.sqrt();
        let mu = mean_ms.ln() - sigma * sigma / 2.0;
        LatencyDistribution::LogNormal { mu, sigma }
    }

    /// Log-normal with a given mean and coefficient of variation.
    pub fn from_mean_cv(mean_ms: f64, cv: f64) -> Self {
        let sigma2 = (1.0 + cv * cv).ln();
        let mu = mean_ms.ln() - sigma2 / 2.0;
        LatencyDistribution::LogNormal {
            mu,
            sigma: sigma2.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            LatencyDistribution::LogNormal { sigma, .. } => {
                if *sigma < 0.0 {
                    return Err(SimError::validation("latency_model.sigma", "must be >= 0"));
                }
            }
            LatencyDistribution::Empirical { samples_ms } => {
                if samples_ms.is_empty() {
                    return Err(SimError::validation(
                        "latency_model.samples_ms",
                        "empirical family requires a non-empty sample list",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Quantile in ms for `p` in (0, 1).
    pub fn quantile_ms(&self, p: f64) -> f64 {
        match self {
            LatencyDistribution::LogNormal { mu, sigma } => (mu + sigma * normal_quantile(p)).exp(),
            LatencyDistribution::Empirical { samples_ms } => {
                let mut sorted = samples_ms.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                crate::stats::percentile_nearest_rank(&sorted, p * 100.0)
            }
        }
    }

    pub fn median_ms(&self) -> f64 {
        self.quantile_ms(0.5)
    }

    pub fn sample_ms(&self, rng: &mut impl rand::Rng) -> f64 {
        match self {
            LatencyDistribution::LogNormal { mu, sigma } => {
                if *sigma == 0.0 {
                    return mu.exp();
                }
                let z: f64 = rand_distr::StandardNormal.sample_from(rng);
                (mu + sigma * z).exp()
            }
            LatencyDistribution::Empirical { samples_ms } => {
                let idx = rng.gen_range(0..samples_ms.len());
                samples_ms[idx]
            }
        }
    }
}

trait SampleFrom {
    fn sample_from(&self, rng: &mut impl rand::Rng) -> f64;
}

impl SampleFrom for rand_distr::StandardNormal {
    fn sample_from(&self, rng: &mut impl rand::Rng) -> f64 {
        rand::prelude::Distribution::sample(self, rng)
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Tool-class latency models keyed by tool kind.
pub type ToolLatencyTable = BTreeMap<ToolKind, LatencyDistribution>;

/// Production-trace defaults: (P50, P95) per tool class in ms.
pub fn default_tool_latencies() -> ToolLatencyTable {
    let mut t = BTreeMap::new();
    t.insert(
        ToolKind::CodeExecution,
        LatencyDistribution::from_p50_p95(180.0, 2_400.0),
    );
    t.insert(
        ToolKind::FileOps,
        LatencyDistribution::from_p50_p95(45.0, 320.0),
    );
    t.insert(
        ToolKind::WebApi,
        LatencyDistribution::from_p50_p95(850.0, 4_500.0),
    );
    t.insert(
        ToolKind::Database,
        LatencyDistribution::from_p50_p95(120.0, 890.0),
    );
    t
}

/// One directed edge of an execution graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AegEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub prob: f64,
    /// Retry back-edge; excluded from DAG/expected-path computations.
    #[serde(default)]
    pub retry: bool,
}

/// Probabilistic graph of an agent task's inference steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentExecutionGraph {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<AegEdge>,
    pub tool_of: BTreeMap<NodeId, ToolKind>,
    pub terminal: BTreeSet<NodeId>,
}

impl AgentExecutionGraph {
    pub fn empty() -> Self {
        AgentExecutionGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            tool_of: BTreeMap::new(),
            terminal: BTreeSet::new(),
        }
    }

    /// Linear chain with uniform forward probability and a single tool kind.
    pub fn linear_chain(len: usize, continue_prob: f64, tool: ToolKind) -> Self {
        let nodes: Vec<NodeId> = (0..len as NodeId).collect();
        let edges = (0..len.saturating_sub(1))
            .map(|i| AegEdge {
                from: i as NodeId,
                to: (i + 1) as NodeId,
                prob: continue_prob,
                retry: false,
            })
            .collect();
        let tool_of = nodes.iter().map(|&n| (n, tool.clone())).collect();
        let mut terminal = BTreeSet::new();
        if len > 0 {
            terminal.insert((len - 1) as NodeId);
        }
        AgentExecutionGraph {
            nodes,
            edges,
            tool_of,
            terminal,
        }
    }

    pub fn outgoing(&self, node: NodeId) -> impl Iterator<Item = &AegEdge> {
        self.edges.iter().filter(move |e| e.from == node)
    }

    pub fn forward_outgoing(&self, node: NodeId) -> impl Iterator<Item = &AegEdge> {
        self.outgoing(node).filter(|e| !e.retry)
    }

    /// Sum of all outgoing edge probabilities; residual mass is termination.
    pub fn continue_prob(&self, node: NodeId) -> f64 {
        self.outgoing(node).map(|e| e.prob).sum()
    }

    pub fn contains_node(&self, node: NodeId) -> bool {
        self.nodes.contains(&node)
    }

    /// Topological order over forward edges starting from `start`.
    /// Returns None if the forward subgraph has a cycle.
    pub fn topo_from(&self, start: NodeId) -> Option<Vec<NodeId>> {
        let mut order = Vec::new();
        let mut state: BTreeMap<NodeId, u8> = BTreeMap::new(); // 1 = visiting, 2 = done
        let mut stack = vec![(start, false)];
        while let Some((n, processed)) = stack.pop() {
            if processed {
                state.insert(n, 2);
                order.push(n);
                continue;
            }
            match state.get(&n) {
                Some(1) => return None,
                Some(2) => continue,
                _ => {}
            }
            state.insert(n, 1);
            stack.push((n, true));
            for e in self.forward_outgoing(n) {
                match state.get(&e.to) {
                    Some(1) => return None,
                    Some(2) => {}
                    _ => stack.push((e.to, false)),
                }
            }
        }
        order.reverse();
        Some(order)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for e in &self.edges {
            if !(0.0..=1.0).contains(&e.prob) {
                return Err(SimError::validation(
                    "aeg.edges.prob",
                    format!("edge {}->{} probability {} outside [0,1]", e.from, e.to, e.prob),
                ));
            }
        }
        for &n in &self.nodes {
            if self.terminal.contains(&n) {
                continue;
            }
            let total = self.continue_prob(n);
            if total > 1.0 + 1e-9 {
                return Err(SimError::validation(
                    "aeg.edges",
                    format!("node {} outgoing probability sum {} exceeds 1", n, total),
                ));
            }
        }
        // Forward subgraph must be acyclic and retry edges must point at an
        // ancestor on the active chain.
        for &n in &self.nodes {
            if self.topo_from(n).is_none() {
                return Err(SimError::validation("aeg.edges", "forward edges form a cycle"));
            }
        }
        for e in self.edges.iter().filter(|e| e.retry) {
            let reachable = self
                .topo_from(e.to)
                .map(|o| o.contains(&e.from))
                .unwrap_or(false);
            if !reachable {
                return Err(SimError::validation(
                    "aeg.edges",
                    format!("retry edge {}->{} does not target an ancestor", e.from, e.to),
                ));
            }
        }
        Ok(())
    }

    /// Probability of reaching each forward-reachable node from `start`,
    /// ignoring retry edges.
    pub fn reach_probs(&self, start: NodeId) -> BTreeMap<NodeId, f64> {
        let mut reach = BTreeMap::new();
        let Some(order) = self.topo_from(start) else {
            return reach;
        };
        reach.insert(start, 1.0);
        for &v in &order {
            let pv = *reach.get(&v).unwrap_or(&0.0);
            for e in self.forward_outgoing(v) {
                *reach.entry(e.to).or_insert(0.0) += pv * e.prob;
            }
        }
        reach
    }
}

/// Tenant workload class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TenantClass {
    Heavy,
    Medium,
    Light,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tenant {
    pub tenant_id: TenantId,
    pub class: TenantClass,
    pub arrival_rate_per_min: f64,
    #[serde(default)]
    pub active_tasks: BTreeSet<TaskId>,
}

/// Planned shape of one inference step, fixed at workload generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub node: NodeId,
    /// New prompt tokens appended before this step (observation + instructions).
    pub prompt_increment: u64,
    pub output_tokens: u64,
    /// Realized wait of the tool call that follows this step, fixed at
    /// workload generation so every policy variant replays the same draws
    /// (common random numbers); 0 for the final step.
    #[serde(default)]
    pub tool_wait_ms: f64,
}

/// Timing record of one executed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub tool_wait_us: Micros,
    pub regen_tokens: u64,
}

/// One agent task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub tenant_id: TenantId,
    pub aeg: AgentExecutionGraph,
    pub current_node: NodeId,
    pub context_tokens: u64,
    pub steps_done: u64,
    pub submit_us: Micros,
    pub deadline_us: Micros,
    pub plan: Vec<StepPlan>,
    #[serde(default)]
    pub records: Vec<StepRecord>,
}

impl Task {
    /// Full prompt length at plan step `i`: all prior increments plus all
    /// prior outputs plus this step's increment.
    pub fn prompt_tokens_at(&self, i: usize) -> u64 {
        let mut total = 0;
        for (j, s) in self.plan.iter().enumerate().take(i + 1) {
            total += s.prompt_increment;
            if j < i {
                total += s.output_tokens;
            }
        }
        total
    }

    /// Context (prompt + output KV) after plan step `i` completes.
    pub fn context_after(&self, i: usize) -> u64 {
        self.prompt_tokens_at(i) + self.plan[i].output_tokens
    }
}

/// Worker compute cost model. The paper reports hardware only; the per-token
/// rates here are the simulator's knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Prefill throughput in tokens/s (serial per worker).
    pub prefill_rate: f64,
    /// Per-request decode throughput in tokens/s (decode batches freely).
    pub decode_rate: f64,
    pub instances_per_node: u32,
    pub bytes_per_token: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            prefill_rate: 5_000.0,
            decode_rate: 30.0,
            instances_per_node: 1,
            // 10.7 GiB at 32K context.
            bytes_per_token: 350_612,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.prefill_rate <= 0.0 {
            return Err(SimError::validation("cost_model.prefill_rate", "must be > 0"));
        }
        if self.decode_rate <= 0.0 {
            return Err(SimError::validation("cost_model.decode_rate", "must be > 0"));
        }
        if self.bytes_per_token == 0 {
            return Err(SimError::validation("cost_model.bytes_per_token", "must be > 0"));
        }
        Ok(())
    }

    pub fn prefill_us(&self, tokens: u64) -> Micros {
        (tokens as f64 / self.prefill_rate * 1e6).round() as Micros
    }

    pub fn decode_us(&self, tokens: u64) -> Micros {
        (tokens as f64 / self.decode_rate * 1e6).round() as Micros
    }
}

/// Expected remaining duration of a task from its current node, walking the
/// AEG's forward edges with reach probabilities. Tool latency is charged per
/// continuing step at the tool's median.
pub fn expected_duration(task: &Task, tools: &ToolLatencyTable, cost: &CostModel) -> Micros {
    if task.aeg.nodes.is_empty() {
        return 0;
    }
    let reach = task.aeg.reach_probs(task.current_node);
    let mut total = 0.0;
    for (&node, &p) in &reach {
        let (inc, out) = step_tokens_for_node(task, node);
        let compute = cost.prefill_us(inc) as f64 + cost.decode_us(out) as f64;
        total += p * compute;
        let cont = task.aeg.continue_prob(node);
        if cont > 0.0 {
            if let Some(dist) = task.aeg.tool_of.get(&node).and_then(|t| tools.get(t)) {
                total += p * cont * ms_to_us(dist.median_ms()) as f64;
            }
        }
    }
    total.round() as Micros
}

/// Ideal unqueued duration of the realized plan: warm-cache prefill of each
/// step's increment plus decode, tool latency at the median between steps.
/// Deadlines derive from this rather than from the probability-weighted AEG
/// expectation, so a miss always reflects scheduling (queueing, rerouting,
/// regeneration, latency tails) and never plan-length luck.
pub fn plan_duration(task: &Task, tools: &ToolLatencyTable, cost: &CostModel) -> Micros {
    let mut total = 0u64;
    for (i, s) in task.plan.iter().enumerate() {
        total += cost.prefill_us(s.prompt_increment) + cost.decode_us(s.output_tokens);
        if i + 1 < task.plan.len() {
            if let Some(dist) = task.aeg.tool_of.get(&s.node).and_then(|t| tools.get(t)) {
                total += ms_to_us(dist.median_ms());
            }
        }
    }
    total
}

/// Tokens planned for `node`, falling back to the plan-wide mean when the
/// realized plan has no entry for it (untaken branches).
pub(crate) fn step_tokens_for_node(task: &Task, node: NodeId) -> (u64, u64) {
    if let Some(s) = task.plan.iter().find(|s| s.node == node) {
        return (s.prompt_increment, s.output_tokens);
    }
    if task.plan.is_empty() {
        return (0, 0);
    }
    let n = task.plan.len() as u64;
    let inc = task.plan.iter().map(|s| s.prompt_increment).sum::<u64>() / n;
    let out = task.plan.iter().map(|s| s.output_tokens).sum::<u64>() / n;
    (inc, out)
}

/// Default SLO factor: deadline = submit + slo_factor * expected duration.
pub const DEFAULT_SLO_FACTOR: f64 = 1.8;

/// Per-session KV-cache residency on a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub session_id: TaskId,
    pub worker_id: WorkerId,
    pub tokens: u64,
    pub bytes: u64,
    pub last_access_us: Micros,
    pub ttl_expiry_us: Option<Micros>,
    pub reuse_prob: f64,
}

impl CacheEntry {
    pub fn new(session_id: TaskId, worker_id: WorkerId, tokens: u64, bytes_per_token: u64, now: Micros) -> Self {
        CacheEntry {
            session_id,
            worker_id,
            tokens,
            bytes: tokens * bytes_per_token,
            last_access_us: now,
            ttl_expiry_us: None,
            reuse_prob: 0.0,
        }
    }

    pub fn set_tokens(&mut self, tokens: u64, bytes_per_token: u64) {
        self.tokens = tokens;
        self.bytes = tokens * bytes_per_token;
    }

    pub fn ttl_active(&self, now: Micros) -> bool {
        self.ttl_expiry_us.map(|t| t > now).unwrap_or(false)
    }
}

/// A step request waiting in a worker queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedRequest {
    pub task_id: TaskId,
    pub tenant_id: TenantId,
    pub step_index: usize,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub enqueue_us: Micros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub worker_id: WorkerId,
    pub kv_capacity_bytes: u64,
    pub resident: BTreeMap<TaskId, CacheEntry>,
    pub queue: VecDeque<QueuedRequest>,
    /// Queued work / epoch capacity, clamped to [0,1]; recomputed each epoch.
    pub load: f64,
    pub busy_us: Micros,
}

impl WorkerState {
    pub fn new(worker_id: WorkerId, kv_capacity_bytes: u64) -> Self {
        WorkerState {
            worker_id,
            kv_capacity_bytes,
            resident: BTreeMap::new(),
            queue: VecDeque::new(),
            load: 0.0,
            busy_us: 0,
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.resident.values().map(|e| e.bytes).sum()
    }

    /// Bytes held by entries still expecting reuse. Entries with no expected
    /// reuse are reclaimable garbage and do not constitute memory pressure.
    pub fn live_bytes(&self) -> u64 {
        self.resident.values().filter(|e| e.reuse_prob > 0.0).map(|e| e.bytes).sum()
    }

    pub fn cached(&self, session: TaskId) -> bool {
        self.resident.contains_key(&session)
    }
}

/// Event kinds, ordered for the deterministic tiebreak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    TaskArrive { task_id: TaskId, tenant_id: TenantId },
    StepStartPrefill { task_id: TaskId, worker_id: WorkerId, step: usize, prompt_tokens: u64, regen_tokens: u64 },
    StepStartDecode { task_id: TaskId, worker_id: WorkerId, step: usize, output_tokens: u64 },
    StepDone { task_id: TaskId, worker_id: WorkerId, step: usize, context_tokens: u64 },
    ToolStart { task_id: TaskId, worker_id: WorkerId, tool: ToolKind, ttl_us: Micros },
    ToolDone { task_id: TaskId, worker_id: WorkerId, tool: ToolKind, wait_us: Micros },
    Evict { session_id: TaskId, worker_id: WorkerId, tokens: u64, bytes: u64 },
    PrefetchStart { task_id: TaskId, worker_id: WorkerId, tokens: u64 },
    PrefetchDone { task_id: TaskId, worker_id: WorkerId, tokens: u64 },
    Steal { session_id: TaskId, thief: WorkerId, victim: WorkerId },
    MigrateDone { session_id: TaskId, thief: WorkerId, victim: WorkerId, bytes: u64 },
    Preempt { task_id: TaskId, worker_id: WorkerId, dest: WorkerId },
    EpochTick { epoch: u64 },
    TaskFinish { task_id: TaskId, tct_us: Micros, on_time: bool },
}

impl EventKind {
    pub fn ordinal(&self) -> u8 {
        match self {
            EventKind::TaskArrive { .. } => 0,
            EventKind::StepStartPrefill { .. } => 1,
            EventKind::StepStartDecode { .. } => 2,
            EventKind::StepDone { .. } => 3,
            EventKind::ToolStart { .. } => 4,
            EventKind::ToolDone { .. } => 5,
            EventKind::Evict { .. } => 6,
            EventKind::PrefetchStart { .. } => 7,
            EventKind::PrefetchDone { .. } => 8,
            EventKind::Steal { .. } => 9,
            EventKind::MigrateDone { .. } => 10,
            EventKind::Preempt { .. } => 11,
            EventKind::EpochTick { .. } => 12,
            EventKind::TaskFinish { .. } => 13,
        }
    }

    pub fn task_key(&self) -> TaskId {
        match self {
            EventKind::TaskArrive { task_id, .. }
            | EventKind::StepStartPrefill { task_id, .. }
            | EventKind::StepStartDecode { task_id, .. }
            | EventKind::StepDone { task_id, .. }
            | EventKind::ToolStart { task_id, .. }
            | EventKind::ToolDone { task_id, .. }
            | EventKind::PrefetchStart { task_id, .. }
            | EventKind::PrefetchDone { task_id, .. }
            | EventKind::Preempt { task_id, .. }
            | EventKind::TaskFinish { task_id, .. } => *task_id,
            EventKind::Evict { session_id, .. }
            | EventKind::Steal { session_id, .. }
            | EventKind::MigrateDone { session_id, .. } => *session_id,
            EventKind::EpochTick { epoch } => *epoch,
        }
    }
}

/// One logged simulation event; totally ordered by (time, seq).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time_us: Micros,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step_task(plan: Vec<StepPlan>, aeg: AgentExecutionGraph) -> Task {
        Task {
            task_id: 1,
            tenant_id: 0,
            aeg,
            current_node: 0,
            context_tokens: 0,
            steps_done: 0,
            submit_us: 0,
            deadline_us: 0,
            plan,
            records: Vec::new(),
        }
    }

    #[test]
    fn lognormal_fit_matches_table_quantiles() {
        let d = LatencyDistribution::from_p50_p95(180.0, 2_400.0);
        assert!((d.quantile_ms(0.5) - 180.0).abs() < 1e-6);
        // quantile_ms goes through the rational inverse-CDF approximation
        // (~1e-9 relative in z), so the tolerance is looser than at the median.
        assert!((d.quantile_ms(0.95) - 2_400.0).abs() < 1e-3);
        if let LatencyDistribution::LogNormal { mu, sigma } = d {
            assert!((mu - 180.0_f64.ln()).abs() < 1e-12);
            assert!((sigma - 1.575).abs() < 1e-3);
        } else {
            panic!("expected log-normal");
        }
    }

    #[test]
    fn mean_cv_fit_preserves_mean() {
        for cv in [0.5, 1.0, 3.0] {
            let d = LatencyDistribution::from_mean_cv(1200.0, cv);
            if let LatencyDistribution::LogNormal { mu, sigma } = d {
                let mean = (mu + sigma * sigma / 2.0).exp();
                assert!((mean - 1200.0).abs() < 1e-6, "cv={cv}");
            }
        }
    }

    #[test]
    fn expected_duration_single_node() {
        let aeg = AgentExecutionGraph::linear_chain(1, 0.0, ToolKind::FileOps);
        let task = one_step_task(
            vec![StepPlan { node: 0, prompt_increment: 1000, output_tokens: 100, tool_wait_ms: 0.0 }],
            aeg,
        );
        let cost = CostModel::default();
        let d = expected_duration(&task, &default_tool_latencies(), &cost);
        // prefill(1000)/5000 tps = 200 ms; decode(100)/30 tps = 3333.333 ms
        let want = cost.prefill_us(1000) + cost.decode_us(100);
        assert_eq!(d, want);
    }

    #[test]
    fn expected_duration_linear_chain_with_tool() {
        let aeg = AgentExecutionGraph::linear_chain(3, 1.0, ToolKind::FileOps);
        let plan = (0..3)
            .map(|i| StepPlan { node: i, prompt_increment: 1000, output_tokens: 100, tool_wait_ms: 0.0 })
            .collect();
        let task = one_step_task(plan, aeg);
        let cost = CostModel::default();
        let d = expected_duration(&task, &default_tool_latencies(), &cost);
        let step = cost.prefill_us(1000) + cost.decode_us(100);
        // FileOps P50 is 45 ms; charged after the first two steps only.
        let want = 3 * step + 2 * ms_to_us(45.0);
        assert_eq!(d, want);
    }

    #[test]
    fn expected_duration_immediate_termination() {
        let mut aeg = AgentExecutionGraph::linear_chain(2, 1.0, ToolKind::FileOps);
        // p_term = 1 at node 0: drop the outgoing edge.
        aeg.edges.clear();
        aeg.terminal.insert(0);
        let plan = vec![
            StepPlan { node: 0, prompt_increment: 1000, output_tokens: 100, tool_wait_ms: 0.0 },
            StepPlan { node: 1, prompt_increment: 1000, output_tokens: 100, tool_wait_ms: 0.0 },
        ];
        let task = one_step_task(plan, aeg);
        let cost = CostModel::default();
        let d = expected_duration(&task, &default_tool_latencies(), &cost);
        assert_eq!(d, cost.prefill_us(1000) + cost.decode_us(100));
    }

    #[test]
    fn expected_duration_empty_graph_is_zero() {
        let task = one_step_task(Vec::new(), AgentExecutionGraph::empty());
        assert_eq!(
            expected_duration(&task, &default_tool_latencies(), &CostModel::default()),
            0
        );
    }

    #[test]
    fn retry_edge_must_target_ancestor() {
        let mut aeg = AgentExecutionGraph::linear_chain(3, 0.5, ToolKind::FileOps);
        aeg.edges.push(AegEdge { from: 2, to: 1, prob: 0.3, retry: true });
        aeg.validate().unwrap();
        aeg.edges.push(AegEdge { from: 0, to: 2, prob: 0.1, retry: true });
        assert!(aeg.validate().is_err());
    }

    #[test]
    fn outgoing_mass_above_one_rejected() {
        let mut aeg = AgentExecutionGraph::linear_chain(2, 0.9, ToolKind::FileOps);
        aeg.edges.push(AegEdge { from: 0, to: 1, prob: 0.5, retry: false });
        assert!(aeg.validate().is_err());
    }

    #[test]
    fn prompt_tokens_accumulate() {
        let aeg = AgentExecutionGraph::linear_chain(3, 1.0, ToolKind::FileOps);
        let plan = vec![
            StepPlan { node: 0, prompt_increment: 1000, output_tokens: 100, tool_wait_ms: 0.0 },
            StepPlan { node: 1, prompt_increment: 500, output_tokens: 200, tool_wait_ms: 0.0 },
            StepPlan { node: 2, prompt_increment: 300, output_tokens: 50, tool_wait_ms: 0.0 },
        ];
        let task = one_step_task(plan, aeg);
        assert_eq!(task.prompt_tokens_at(0), 1000);
        assert_eq!(task.prompt_tokens_at(1), 1000 + 100 + 500);
        assert_eq!(task.context_after(1), 1600 + 200);
        assert_eq!(task.prompt_tokens_at(2), 1800 + 300);
    }

    #[test]
    fn cache_entry_bytes_exact() {
        let mut e = CacheEntry::new(7, 0, 100, 350_612, 0);
        assert_eq!(e.bytes, 100 * 350_612);
        e.set_tokens(250, 350_612);
        assert_eq!(e.bytes, 250 * 350_612);
    }

    #[test]
    fn event_roundtrip_json() {
        let ev = SimEvent {
            time_us: 1234,
            seq: 9,
            kind: EventKind::Evict { session_id: 3, worker_id: 1, tokens: 10, bytes: 100 },
        };
        let s = serde_json::to_string(&ev).unwrap();
        let back: SimEvent = serde_json::from_str(&s).unwrap();
        assert_eq!(ev, back);
    }
}
