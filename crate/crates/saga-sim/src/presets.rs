//! Canned experiment setups shared by the CLI and the end-to-end tests.
//!
//! Each `*_seed` runner builds its (calibrated) configuration, runs one
//! seeded replication, and returns raw per-seed results; aggregation across
//! seeds lives with the caller.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::aeg::{prediction_accuracy, InferOutcome, PatternModel};
use crate::cache::{belady_replay, competitive_ratio, replay_policy, EvictionPolicy, ReplayConfig};
use crate::config::{ClusterConfig, SimConfig, Strategy};
use crate::error::SimError;
use crate::fairness::FairnessPolicy;
use crate::model::{
    default_tool_latencies, AgentExecutionGraph, CostModel, LatencyDistribution, TenantClass,
    ToolKind,
};
use crate::sim::{run, SimOutput};
use crate::workload::{
    derive_access_trace, generate_workload, TenantSpec, WorkloadKind, WorkloadSpec,
};

/// Replay policies compared in the competitive-ratio experiment, weakest
/// baseline first.
pub const REPLAY_POLICIES: [EvictionPolicy; 4] = [
    EvictionPolicy::EvictAll,
    EvictionPolicy::Lru,
    EvictionPolicy::PrefixLru,
    EvictionPolicy::WaLru,
];

/// Components toggled one at a time in the ablation experiment.
pub const ABLATION_COMPONENTS: [&str; 6] =
    ["session-affinity", "eviction", "ttl", "prefetch", "stealing", "afs"];

// ---------------------------------------------------------------------------
// Competitive-ratio replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RatioOutcome {
    pub opt_cost: u64,
    pub capacity_tokens: u64,
    /// policy name -> cost / opt cost
    pub ratios: BTreeMap<&'static str, f64>,
}

fn ratio_workload_spec() -> WorkloadSpec {
    // Long-chain agents mixed with high-churn short tasks: session lifetime
    // and continuation odds vary widely, so workflow metadata carries real
    // signal for the workflow-aware policy.
    let mut spec = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 480.0);
    spec.tenants[0].mean_steps = 24.0;
    spec.tenants[0].max_steps = 100;
    spec.tenants[0].rate_per_min = 6.0;
    // Keep decode short so tool pauses, not decode noise, set the gaps
    // between a session's accesses.
    spec.tenants[0].output_range = (10, 60);
    // Small shared prompt relative to grown context.
    spec.tenants[0].prompt_range = (1_200, 2_400);
    let mut churn = spec.tenants[0].clone();
    churn.tenant_id = 1;
    churn.mean_steps = 1.3;
    churn.max_steps = 10;
    churn.rate_per_min = 240.0;
    spec.tenants.push(churn);
    // Longer pauses keep more sessions simultaneously live, and leave
    // recency a poor proxy for imminent reuse.
    spec.tool_mix = vec![
        (ToolKind::CodeExecution, 0.30),
        (ToolKind::FileOps, 0.10),
        (ToolKind::WebApi, 0.45),
        (ToolKind::Database, 0.15),
    ];
    spec
}

/// Replay one generated trace under every policy at `capacity_frac` of its
/// peak working set and report ratios against the offline optimum.
pub fn ratio_seed(capacity_frac: f64, seed: u64) -> Result<RatioOutcome, SimError> {
    if !(0.0 < capacity_frac && capacity_frac <= 1.0) {
        return Err(SimError::validation("capacity_frac", "must be in (0, 1]"));
    }
    let spec = ratio_workload_spec();
    let cost = CostModel::default();
    let tools = default_tool_latencies();
    let w = generate_workload(&spec, &cost, &tools, seed)?;
    let trace = derive_access_trace(&w, &tools, &cost, seed);
    let peak = trace.peak_working_set();
    let largest = trace.accesses.iter().map(|a| a.tokens_required).max().unwrap_or(1);
    let capacity = ((peak as f64 * capacity_frac) as u64).max(largest);
    let opt = belady_replay(&trace, capacity)?;
    let cfg = ReplayConfig { tools, ..ReplayConfig::default() };
    let mut ratios = BTreeMap::new();
    for policy in REPLAY_POLICIES {
        let out = replay_policy(&trace, capacity, policy, &cfg)?;
        ratios.insert(policy.name(), competitive_ratio(out.cost_tokens, opt.cost_tokens).value());
    }
    Ok(RatioOutcome { opt_cost: opt.cost_tokens, capacity_tokens: capacity, ratios })
}

// ---------------------------------------------------------------------------
// TTL coverage under tool-latency variance
// ---------------------------------------------------------------------------

/// Single-worker setup where every tool shares one latency distribution of
/// mean 1.2 s and the given coefficient of variation. The TTL grant is
/// capped at 2.5x the mean latency so retention promises stay bounded;
/// heavy-tailed variants push their upper percentiles past that bound and
/// lose coverage, light-tailed ones fit under it.
pub fn ttl_preset(cv: f64) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.workload = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 600.0);
    cfg.workload.tenants[0].mean_steps = 8.0;
    cfg.workload.tenants[0].max_steps = 40;
    cfg.workload.tenants[0].rate_per_min = 20.0;
    cfg.workload.tenants[0].output_range = (10, 50);
    cfg.cluster = ClusterConfig { num_workers: 1, kv_capacity_tokens: 90_000, pin_worker: None };
    cfg.strategy = Strategy::Bfs;
    cfg.horizon_s = 700.0;
    cfg.ttl.ttl_max_ms = 3_000.0;
    let dist = LatencyDistribution::from_mean_cv(1_200.0, cv);
    cfg.tools = ToolKind::BUILTIN.iter().map(|t| (t.clone(), dist.clone())).collect();
    cfg
}

pub fn ttl_coverage_seed(cv: f64, seed: u64) -> Result<Option<f64>, SimError> {
    let mut cfg = ttl_preset(cv);
    cfg.seed = seed;
    Ok(run(&cfg)?.metrics.ttl_coverage)
}

// ---------------------------------------------------------------------------
// Contended multi-tenant cluster (ablation / end-to-end / fairness)
// ---------------------------------------------------------------------------

fn multitenant_small(horizon_s: f64, rate_scale: f64) -> WorkloadSpec {
    // Tenants are deliberately interchangeable: with nothing to prioritize
    // between them, the fair-share layer reduces to roughly FIFO and the
    // remaining knobs can be ablated against a stable background.
    let mut tenants = Vec::new();
    for id in 0..10u32 {
        tenants.push(TenantSpec {
            tenant_id: id,
            class: TenantClass::Medium,
            rate_per_min: 2.0 * rate_scale,
            mean_steps: 8.0,
            // Keeps the largest possible context within one worker's KV.
            max_steps: 9,
            prompt_range: (4_000, 6_000),
            obs_range: (150, 300),
            output_range: (15, 45),
        });
    }
    WorkloadSpec {
        kind: WorkloadKind::MultiTenant,
        horizon_s,
        tenants,
        tool_mix: vec![
            (ToolKind::CodeExecution, 0.15),
            (ToolKind::FileOps, 0.15),
            (ToolKind::WebApi, 0.55),
            (ToolKind::Database, 0.15),
        ],
    }
}

/// Four-worker cluster under KV pressure with the full policy stack on.
pub fn contention_preset() -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.workload = multitenant_small(1800.0, 1.0);
    cfg.cluster = ClusterConfig { num_workers: 4, kv_capacity_tokens: 10_000, pin_worker: None };
    cfg.horizon_s = 2_100.0;
    // Damp hair-trigger steals: a worker must sit idle a while before it
    // raids a neighbour's queue.
    cfg.steal.t_idle_ms = 1_200.0;
    // Hair-trigger preemption, by contrast: blocked urgent work migrates
    // quickly, trading migration latency for fairness.
    cfg.block_threshold_ms = 4_000.0;
    cfg
}

/// One replication with one component removed (`None` = full stack).
pub fn ablation_seed(component: Option<&str>, seed: u64) -> Result<SimOutput, SimError> {
    let mut cfg = contention_preset();
    cfg.seed = seed;
    if let Some(c) = component {
        cfg.ablate(c)?;
    }
    run(&cfg)
}

/// Every component removed at once: plain LRU, least-loaded routing, FCFS,
/// no TTL, no prefetch, no stealing.
pub fn baseline_preset() -> SimConfig {
    let mut cfg = contention_preset();
    for c in ABLATION_COMPONENTS {
        cfg.ablate(c).expect("known component");
    }
    cfg
}

pub fn e2e_seed(full_stack: bool, seed: u64) -> Result<SimOutput, SimError> {
    let mut cfg = if full_stack { contention_preset() } else { baseline_preset() };
    cfg.seed = seed;
    run(&cfg)
}

// ---------------------------------------------------------------------------
// Fairness under saturation
// ---------------------------------------------------------------------------

/// Batch-vs-interactive mix: heavy tenants submit long tasks with large
/// prompts and loose deadlines, light tenants short tasks with tight ones.
/// Admission order decides whether the short tasks survive the queueing.
fn fairness_workload(horizon_s: f64, rate_scale: f64) -> WorkloadSpec {
    let mut tenants = Vec::new();
    for id in 0..10u32 {
        let spec = match id {
            0..=2 => TenantSpec {
                tenant_id: id,
                class: TenantClass::Heavy,
                rate_per_min: 2.35 * rate_scale,
                mean_steps: 12.0,
                max_steps: 16,
                prompt_range: (8_000, 12_000),
                obs_range: (200, 400),
                output_range: (500, 700),
            },
            3..=5 => TenantSpec {
                tenant_id: id,
                class: TenantClass::Medium,
                rate_per_min: 1.5 * rate_scale,
                mean_steps: 6.0,
                max_steps: 10,
                prompt_range: (4_000, 6_000),
                obs_range: (150, 300),
                output_range: (250, 350),
            },
            _ => TenantSpec {
                tenant_id: id,
                class: TenantClass::Light,
                rate_per_min: 9.0 * rate_scale,
                mean_steps: 1.0,
                max_steps: 2,
                prompt_range: (1_000, 2_000),
                obs_range: (100, 200),
                output_range: (60, 100),
            },
        };
        tenants.push(spec);
    }
    WorkloadSpec {
        kind: WorkloadKind::MultiTenant,
        horizon_s,
        tenants,
        tool_mix: vec![
            (ToolKind::CodeExecution, 0.15),
            (ToolKind::FileOps, 0.15),
            (ToolKind::WebApi, 0.55),
            (ToolKind::Database, 0.15),
        ],
    }
}

/// One worker at ~80% offered load on its serial prefill channel, with
/// unbounded concurrency and ample KV: queueing for prefill is the only
/// contention, and admission order decides who meets deadlines.
pub fn fairness_preset(policy: FairnessPolicy) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.workload = fairness_workload(600.0, 1.0);
    cfg.cluster = ClusterConfig { num_workers: 1, kv_capacity_tokens: 500_000, pin_worker: None };
    cfg.horizon_s = 1_200.0;
    cfg.strategy = Strategy::Bfs;
    cfg.fairness = policy;
    cfg
}

pub fn fairness_seed(policy: FairnessPolicy, seed: u64) -> Result<SimOutput, SimError> {
    let mut cfg = fairness_preset(policy);
    cfg.seed = seed;
    run(&cfg)
}

// ---------------------------------------------------------------------------
// Work stealing on a skewed cluster
// ---------------------------------------------------------------------------

/// Two workers with all arrivals routed to worker 0; stealing is the only
/// mechanism that can move work to worker 1.
pub fn steal_preset(enabled: bool) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.workload = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 240.0);
    cfg.workload.tenants[0].mean_steps = 6.0;
    cfg.workload.tenants[0].max_steps = 30;
    cfg.workload.tenants[0].rate_per_min = 30.0;
    cfg.workload.tenants[0].output_range = (50, 150);
    cfg.cluster =
        ClusterConfig { num_workers: 2, kv_capacity_tokens: 200_000, pin_worker: Some(0) };
    cfg.horizon_s = 420.0;
    cfg.steal.enabled = enabled;
    cfg
}

pub fn steal_seed(enabled: bool, seed: u64) -> Result<SimOutput, SimError> {
    let mut cfg = steal_preset(enabled);
    cfg.seed = seed;
    run(&cfg)
}

/// Busy-time imbalance: busiest worker over idlest (floored at 1 us).
pub fn busy_ratio(busy_us: &[crate::model::Micros]) -> f64 {
    let max = busy_us.iter().copied().max().unwrap_or(0);
    let min = busy_us.iter().copied().min().unwrap_or(0);
    max as f64 / (min.max(1)) as f64
}

// ---------------------------------------------------------------------------
// Step-interleaving strategies
// ---------------------------------------------------------------------------

/// One saturated worker with KV capacity for only a few live sessions, so
/// admission width drives both throughput and eviction churn.
pub fn strategy_preset(strategy: Strategy) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.workload = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 300.0);
    cfg.workload.tenants[0].mean_steps = 6.0;
    cfg.workload.tenants[0].max_steps = 30;
    cfg.workload.tenants[0].rate_per_min = 40.0;
    cfg.workload.tenants[0].output_range = (50, 150);
    cfg.cluster = ClusterConfig { num_workers: 1, kv_capacity_tokens: 15_000, pin_worker: None };
    cfg.horizon_s = 600.0;
    cfg.strategy = strategy;
    cfg
}

pub fn strategy_seed(strategy: Strategy, seed: u64) -> Result<SimOutput, SimError> {
    let mut cfg = strategy_preset(strategy);
    cfg.seed = seed;
    run(&cfg)
}

// ---------------------------------------------------------------------------
// Workflow-pattern inference
// ---------------------------------------------------------------------------

/// Ground-truth generator for pattern inference: a four-tool chain with
/// fixed continuation probabilities, terminating after the last tool.
pub const PATTERN_CHAIN: [ToolKind; 4] = [
    ToolKind::CodeExecution,
    ToolKind::FileOps,
    ToolKind::WebApi,
    ToolKind::Database,
];
pub const PATTERN_CONT: [f64; 3] = [0.95, 0.90, 0.85];

fn sample_chain_trace(rng: &mut impl Rng) -> Vec<ToolKind> {
    let mut trace = vec![PATTERN_CHAIN[0].clone()];
    for (i, p) in PATTERN_CONT.iter().enumerate() {
        if rng.gen_bool(*p) {
            trace.push(PATTERN_CHAIN[i + 1].clone());
        } else {
            break;
        }
    }
    trace
}

#[derive(Debug, Clone)]
pub struct PatternEval {
    pub inferred: AgentExecutionGraph,
    /// Tool pairs the inferred graph should connect, in chain order.
    pub expected_edges: Vec<(ToolKind, ToolKind)>,
    pub holdout_accuracy: f64,
}

/// Train a pattern model on sampled chain traces and score next-step
/// prediction on a held-out sample.
pub fn pattern_eval(seed: u64) -> PatternEval {
    let mut model = PatternModel::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0);
    for _ in 0..60 {
        let t = sample_chain_trace(&mut rng);
        model.observe(&t);
    }
    let inferred = match model.infer() {
        InferOutcome::Graph(g) => g,
        InferOutcome::NotReady => unreachable!("60 observed tasks"),
    };
    let mut holdout_rng = ChaCha20Rng::seed_from_u64(seed);
    holdout_rng.set_stream(1);
    let holdout: Vec<Vec<ToolKind>> =
        (0..200).map(|_| sample_chain_trace(&mut holdout_rng)).collect();
    let holdout_accuracy = prediction_accuracy(&model, &inferred, &holdout);
    let expected_edges = PATTERN_CHAIN
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect();
    PatternEval { inferred, expected_edges, holdout_accuracy }
}
