//! Trace-shaped workload generation: Poisson arrivals per tenant,
//! right-skewed step counts, and per-step token plans, plus derivation of
//! offline cache-access traces for replay experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::aeg::overlap;
use crate::cache::{Access, CacheAccessTrace};
use crate::error::SimError;
use crate::model::{
    plan_duration, ms_to_us, AegEdge, AgentExecutionGraph, CostModel, Micros, StepPlan, Task,
    TaskId, Tenant, TenantClass, TenantId, ToolKind, ToolLatencyTable, DEFAULT_SLO_FACTOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    SweBenchLike,
    WebArenaLike,
    MultiTenant,
}

impl std::str::FromStr for WorkloadKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "swebench" | "swe-bench-like" => Ok(WorkloadKind::SweBenchLike),
            "webarena" | "web-arena-like" => Ok(WorkloadKind::WebArenaLike),
            "multitenant" | "multi-tenant" => Ok(WorkloadKind::MultiTenant),
            other => Err(SimError::validation("kind", format!("unknown workload kind `{other}`"))),
        }
    }
}

/// One tenant's task-shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantSpec {
    pub tenant_id: TenantId,
    pub class: TenantClass,
    pub rate_per_min: f64,
    pub mean_steps: f64,
    pub max_steps: u64,
    /// Initial prompt tokens, uniform inclusive range.
    pub prompt_range: (u64, u64),
    /// Observation tokens appended before each later step.
    pub obs_range: (u64, u64),
    pub output_range: (u64, u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// Arrival-generation horizon in seconds.
    pub horizon_s: f64,
    pub tenants: Vec<TenantSpec>,
    /// Tool sampling weights per step.
    pub tool_mix: Vec<(ToolKind, f64)>,
}

fn default_tool_mix() -> Vec<(ToolKind, f64)> {
    vec![
        (ToolKind::CodeExecution, 0.35),
        (ToolKind::FileOps, 0.35),
        (ToolKind::WebApi, 0.15),
        (ToolKind::Database, 0.15),
    ]
}

impl WorkloadSpec {
    pub fn preset(kind: WorkloadKind, horizon_s: f64) -> Self {
        let tenants = match kind {
            WorkloadKind::SweBenchLike => vec![TenantSpec {
                tenant_id: 0,
                class: TenantClass::Medium,
                rate_per_min: 8.0,
                mean_steps: 37.0,
                max_steps: 150,
                prompt_range: (2_000, 4_000),
                obs_range: (100, 400),
                output_range: (100, 500),
            }],
            WorkloadKind::WebArenaLike => vec![TenantSpec {
                tenant_id: 0,
                class: TenantClass::Medium,
                rate_per_min: 8.0,
                mean_steps: 18.0,
                max_steps: 150,
                prompt_range: (4_000, 8_000),
                obs_range: (100, 400),
                output_range: (50, 200),
            }],
            WorkloadKind::MultiTenant => {
                let mut t = Vec::new();
                for id in 0..10u32 {
                    let (class, rate, steps) = match id {
                        0..=2 => (TenantClass::Heavy, 16.0, 100.0),
                        3..=6 => (TenantClass::Medium, 8.0, 30.0),
                        _ => (TenantClass::Light, 4.0, 10.0),
                    };
                    t.push(TenantSpec {
                        tenant_id: id,
                        class,
                        rate_per_min: rate,
                        mean_steps: steps,
                        max_steps: 150,
                        prompt_range: (2_000, 4_000),
                        obs_range: (100, 400),
                        output_range: (100, 500),
                    });
                }
                t
            }
        };
        WorkloadSpec { kind, horizon_s, tenants, tool_mix: default_tool_mix() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon_s <= 0.0 {
            return Err(SimError::validation("workload.horizon_s", "must be > 0"));
        }
        if self.tenants.is_empty() {
            return Err(SimError::validation("workload.tenants", "must not be empty"));
        }
        for (i, t) in self.tenants.iter().enumerate() {
            let path = |f: &str| format!("workload.tenants[{i}].{f}");
            if t.rate_per_min <= 0.0 {
                return Err(SimError::validation(path("rate_per_min"), "must be > 0"));
            }
            if t.mean_steps < 1.0 {
                return Err(SimError::validation(path("mean_steps"), "must be >= 1"));
            }
            if t.max_steps == 0 {
                return Err(SimError::validation(path("max_steps"), "must be >= 1"));
            }
            for (name, (lo, hi)) in [
                ("prompt_range", t.prompt_range),
                ("obs_range", t.obs_range),
                ("output_range", t.output_range),
            ] {
                if lo > hi || hi == 0 {
                    return Err(SimError::validation(path(name), "need 0 < lo <= hi"));
                }
            }
        }
        let mix: f64 = self.tool_mix.iter().map(|(_, w)| w).sum();
        if self.tool_mix.is_empty() || mix <= 0.0 {
            return Err(SimError::validation("workload.tool_mix", "weights must sum > 0"));
        }
        Ok(())
    }
}

/// Geometric step count (support >= 1) with mean `mean`, clamped at `max`.
pub fn sample_step_count(rng: &mut impl Rng, mean: f64, max: u64) -> u64 {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let n = ((1.0 - u).ln() / (1.0 - p).ln()).ceil() as u64;
    n.clamp(1, max)
}

fn sample_range(rng: &mut impl Rng, range: (u64, u64)) -> u64 {
    rng.gen_range(range.0..=range.1)
}

fn sample_tool(rng: &mut impl Rng, mix: &[(ToolKind, f64)]) -> ToolKind {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut x = rng.gen_range(0.0..total);
    for (tool, w) in mix {
        if x < *w {
            return tool.clone();
        }
        x -= w;
    }
    mix.last().unwrap().0.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub seed: u64,
    pub tenants: Vec<Tenant>,
    /// Sorted by submit time.
    pub tasks: Vec<Task>,
}

/// Generate a full workload: Poisson arrivals per tenant (independent seeded
/// streams), task shapes from the tenant spec, linear-chain execution graphs
/// with per-node tools, and deadlines from the cost model.
pub fn generate_workload(
    spec: &WorkloadSpec,
    cost: &CostModel,
    tools: &ToolLatencyTable,
    seed: u64,
) -> Result<Workload, SimError> {
    spec.validate()?;
    cost.validate()?;
    let horizon_us = ms_to_us(spec.horizon_s * 1e3);

    // (arrival, tenant index) merged across tenants; each tenant draws from
    // its own RNG stream so one tenant's parameters never perturb another's
    // arrivals.
    let mut arrivals: Vec<(Micros, usize)> = Vec::new();
    for (ti, t) in spec.tenants.iter().enumerate() {
        let mut rng = tenant_rng(seed, t.tenant_id, 0);
        let rate_per_us = t.rate_per_min / 60.0 / 1e6;
        let mut now = 0.0f64;
        loop {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            now += -u.ln() / rate_per_us;
            if now >= horizon_us as f64 {
                break;
            }
            arrivals.push((now.round() as Micros, ti));
        }
    }
    arrivals.sort_by_key(|&(at, ti)| (at, ti));

    let mut tasks = Vec::with_capacity(arrivals.len());
    let mut shape_rngs: Vec<ChaCha20Rng> = spec
        .tenants
        .iter()
        .map(|t| tenant_rng(seed, t.tenant_id, 1))
        .collect();
    for (task_id, &(submit_us, ti)) in arrivals.iter().enumerate() {
        let t = &spec.tenants[ti];
        let rng = &mut shape_rngs[ti];
        let n = sample_step_count(rng, t.mean_steps, t.max_steps) as usize;
        let step_tools: Vec<ToolKind> = (0..n).map(|_| sample_tool(rng, &spec.tool_mix)).collect();
        let plan: Vec<StepPlan> = (0..n)
            .map(|i| StepPlan {
                node: i as u32,
                prompt_increment: if i == 0 {
                    sample_range(rng, t.prompt_range)
                } else {
                    sample_range(rng, t.obs_range)
                },
                output_tokens: sample_range(rng, t.output_range),
                // The wait that follows this step; the last step has none.
                tool_wait_ms: if i + 1 < n {
                    tools.get(&step_tools[i]).map(|d| d.sample_ms(rng)).unwrap_or(0.0)
                } else {
                    0.0
                },
            })
            .collect();
        // Per-task continuation odds scatter around the tenant mean: the
        // workflow signal a cache policy sees is an estimate, not ground
        // truth, so retention guarantees stay meaningful alongside it.
        let cont = (1.0 - 1.0 / t.mean_steps + rng.gen_range(-0.25..0.25)).clamp(0.05, 0.98);
        let aeg = chain_aeg(&step_tools, cont);
        let mut task = Task {
            task_id: task_id as TaskId,
            tenant_id: t.tenant_id,
            aeg,
            current_node: 0,
            context_tokens: 0,
            steps_done: 0,
            submit_us,
            deadline_us: 0,
            plan,
            records: Vec::new(),
        };
        let ideal = plan_duration(&task, tools, cost);
        task.deadline_us = submit_us + (DEFAULT_SLO_FACTOR * ideal as f64).round() as Micros;
        tasks.push(task);
    }

    let tenants = spec
        .tenants
        .iter()
        .map(|t| Tenant {
            tenant_id: t.tenant_id,
            class: t.class,
            arrival_rate_per_min: t.rate_per_min,
            active_tasks: Default::default(),
        })
        .collect();
    Ok(Workload { spec: spec.clone(), seed, tenants, tasks })
}

/// Linear chain over realized step tools: node i -> i+1 with the tenant's
/// continuation probability, last node terminal.
fn chain_aeg(step_tools: &[ToolKind], cont: f64) -> AgentExecutionGraph {
    let n = step_tools.len();
    let mut g = AgentExecutionGraph::empty();
    for (i, tool) in step_tools.iter().enumerate() {
        g.nodes.push(i as u32);
        g.tool_of.insert(i as u32, tool.clone());
        if i + 1 < n {
            g.edges.push(AegEdge { from: i as u32, to: (i + 1) as u32, prob: cont, retry: false });
        }
    }
    g.terminal.insert(n.saturating_sub(1) as u32);
    g
}

fn tenant_rng(seed: u64, tenant: TenantId, lane: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((tenant as u64) << 8 | lane);
    rng
}

/// Flatten a workload into an offline cache-access sequence: one access per
/// step per task, timed by nominal warm-cache compute plus sampled tool
/// waits. Carries the workflow metadata (reuse probability, pause tool,
/// realized pause) that workflow-aware replay policies consume.
pub fn derive_access_trace(
    workload: &Workload,
    tools: &ToolLatencyTable,
    cost: &CostModel,
    seed: u64,
) -> CacheAccessTrace {
    let mut accesses: Vec<Access> = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // distinct from tenant lanes
    let obs_mean = |t: &TenantSpec| (t.obs_range.0 + t.obs_range.1) / 2;
    for task in &workload.tasks {
        let tspec = workload
            .spec
            .tenants
            .iter()
            .find(|t| t.tenant_id == task.tenant_id)
            .expect("task tenant in spec");
        let mut now = task.submit_us;
        for i in 0..task.plan.len() {
            let required = task.prompt_tokens_at(i);
            let cached = required - task.plan[i].prompt_increment;
            let last = i + 1 == task.plan.len();
            let node = task.plan[i].node;
            let tool = task.aeg.tool_of.get(&node).cloned();
            let pause_ms = if last {
                0.0
            } else {
                tool.as_ref()
                    .and_then(|t| tools.get(t))
                    .map(|d| d.sample_ms(&mut rng))
                    .unwrap_or(0.0)
            };
            let reuse = if last {
                0.0
            } else {
                let context = task.context_after(i);
                task.aeg.continue_prob(node) * overlap(context, obs_mean(tspec))
            };
            accesses.push(Access {
                time_us: now,
                session: task.task_id,
                tokens_required: required,
                tokens_cached_if_retained: cached,
                reuse_prob: reuse,
                pause_tool: if last { None } else { tool },
                pause_ms,
            });
            now += cost.prefill_us(task.plan[i].prompt_increment)
                + cost.decode_us(task.plan[i].output_tokens)
                + ms_to_us(pause_ms);
        }
    }
    accesses.sort_by(|a, b| a.time_us.cmp(&b.time_us).then(a.session.cmp(&b.session)));
    CacheAccessTrace { accesses }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_tool_latencies;

    #[test]
    fn step_counts_hit_target_mean_and_cap() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 10_000;
        let samples: Vec<u64> = (0..n).map(|_| sample_step_count(&mut rng, 37.0, 150)).collect();
        let mean = samples.iter().sum::<u64>() as f64 / n as f64;
        assert!((mean - 37.0).abs() / 37.0 < 0.10, "mean = {mean}");
        assert!(samples.iter().all(|&s| (1..=150).contains(&s)));
    }

    #[test]
    fn webarena_prompts_in_range() {
        let spec = WorkloadSpec::preset(WorkloadKind::WebArenaLike, 600.0);
        let w = generate_workload(&spec, &CostModel::default(), &default_tool_latencies(), 3).unwrap();
        assert!(!w.tasks.is_empty());
        for t in &w.tasks {
            let p0 = t.plan[0].prompt_increment;
            assert!((4_000..=8_000).contains(&p0), "prompt {p0}");
            for s in &t.plan {
                assert!((50..=200).contains(&s.output_tokens));
            }
        }
    }

    #[test]
    fn multitenant_heavy_arrival_counts() {
        let spec = WorkloadSpec::preset(WorkloadKind::MultiTenant, 3_600.0);
        let w = generate_workload(&spec, &CostModel::default(), &default_tool_latencies(), 11).unwrap();
        for id in 0..3u32 {
            let n = w.tasks.iter().filter(|t| t.tenant_id == id).count() as f64;
            // Poisson(960): mean 960, sd ~31; allow 5 sd.
            assert!((n - 960.0).abs() < 155.0, "tenant {id}: {n} arrivals");
        }
        assert_eq!(w.tenants.len(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 300.0);
        let tools = default_tool_latencies();
        let a = generate_workload(&spec, &CostModel::default(), &tools, 5).unwrap();
        let b = generate_workload(&spec, &CostModel::default(), &tools, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_workload(&spec, &CostModel::default(), &tools, 6).unwrap();
        assert_ne!(a.tasks, c.tasks);
    }

    #[test]
    fn deadlines_after_submit_and_positive_slack() {
        let spec = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 120.0);
        let w = generate_workload(&spec, &CostModel::default(), &default_tool_latencies(), 9).unwrap();
        for t in &w.tasks {
            assert!(t.deadline_us > t.submit_us);
        }
    }

    #[test]
    fn derived_trace_valid_and_growing() {
        let spec = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 120.0);
        let tools = default_tool_latencies();
        let w = generate_workload(&spec, &CostModel::default(), &tools, 2).unwrap();
        let trace = derive_access_trace(&w, &tools, &CostModel::default(), 2);
        trace.validate().unwrap();
        assert!(!trace.accesses.is_empty());
        // Per-session requirements strictly grow along the chain.
        use std::collections::BTreeMap;
        let mut last: BTreeMap<u64, u64> = BTreeMap::new();
        for a in &trace.accesses {
            if let Some(&prev) = last.get(&a.session) {
                assert!(a.tokens_required > prev);
            }
            assert!(a.reuse_prob >= 0.0 && a.reuse_prob <= 1.0);
            last.insert(a.session, a.tokens_required);
        }
    }

    #[test]
    fn invalid_spec_rejected_with_field_path() {
        let mut spec = WorkloadSpec::preset(WorkloadKind::SweBenchLike, 300.0);
        spec.tenants[0].rate_per_min = 0.0;
        let err = generate_workload(&spec, &CostModel::default(), &default_tool_latencies(), 1)
            .unwrap_err();
        assert!(err.to_string().contains("rate_per_min"), "{err}");
    }
}
