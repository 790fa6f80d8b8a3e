//! Urgency-proportional epoch allocation, preemption triggers, and SLO
//! accounting across tenants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{
    step_tokens_for_node, CostModel, Micros, TaskId, Task, TenantClass, TenantId, WorkerId,
    ms_to_us, us_to_ms,
};

pub const DEFAULT_EPOCH_MS: f64 = 100.0;
pub const DEFAULT_BLOCK_THRESHOLD_MS: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessPolicy {
    Afs,
    Fcfs,
    Uniform,
}

impl std::str::FromStr for FairnessPolicy {
    type Err = crate::SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "afs" => Ok(FairnessPolicy::Afs),
            "fcfs" => Ok(FairnessPolicy::Fcfs),
            "uniform" => Ok(FairnessPolicy::Uniform),
            other => Err(crate::SimError::validation(
                "fairness",
                format!("unknown fairness policy `{other}`"),
            )),
        }
    }
}

/// Expected remaining GPU-ms of a task: probability-weighted prefill+decode
/// over the nodes reachable from its current position. Tool wait is excluded
/// (it occupies no GPU).
pub fn work_remain(task: &Task, cost: &CostModel) -> f64 {
    if task.steps_done as usize >= task.plan.len() || task.aeg.nodes.is_empty() {
        return 0.0;
    }
    let reach = task.aeg.reach_probs(task.current_node);
    let mut total_us = 0.0;
    for (&node, &p) in &reach {
        let (inc, out) = step_tokens_for_node(task, node);
        total_us += p * (cost.prefill_us(inc) as f64 + cost.decode_us(out) as f64);
    }
    us_to_ms(total_us.round() as Micros)
}

/// Tenant urgency: sum over active tasks of remaining work divided by time
/// to deadline. The per-task ratio is the GPU share the task needs to make
/// its deadline; since one step runs on one GPU at a time, it is capped at
/// 1.0. Tasks at or past their deadline sit at the cap rather than blowing
/// up, so hopeless work cannot crowd every other tenant out of the epoch.
pub fn afs_score<'a>(
    tasks: impl IntoIterator<Item = &'a Task>,
    now: Micros,
    cost: &CostModel,
    epoch_ms: f64,
) -> f64 {
    let floor_ms = epoch_ms.max(1e-9);
    tasks
        .into_iter()
        .map(|t| {
            let work = work_remain(t, cost);
            if work == 0.0 {
                return 0.0;
            }
            let remaining_ms = if t.deadline_us > now {
                us_to_ms(t.deadline_us - now).max(floor_ms)
            } else {
                floor_ms
            };
            (work / remaining_ms).min(1.0)
        })
        .sum()
}

/// Split epoch capacity proportionally to urgency, conserving the total
/// exactly via largest-remainder rounding in integer GPU-microseconds.
/// All-zero urgencies degrade to an equal split.
pub fn allocate_epoch(
    urgency: &BTreeMap<TenantId, f64>,
    capacity_gpu_ms: f64,
) -> BTreeMap<TenantId, f64> {
    assert!(capacity_gpu_ms > 0.0, "allocate_epoch requires capacity > 0");
    if urgency.is_empty() {
        return BTreeMap::new();
    }
    let total: f64 = urgency.values().sum();
    let capacity_us = ms_to_us(capacity_gpu_ms);
    let weights: Vec<(TenantId, f64)> = if total > 0.0 {
        urgency.iter().map(|(&t, &u)| (t, u / total)).collect()
    } else {
        let n = urgency.len() as f64;
        urgency.keys().map(|&t| (t, 1.0 / n)).collect()
    };
    let mut floors: Vec<(TenantId, u64, f64)> = weights
        .iter()
        .map(|&(t, w)| {
            let exact = w * capacity_us as f64;
            let floor = exact.floor() as u64;
            (t, floor, exact - floor as f64)
        })
        .collect();
    let assigned: u64 = floors.iter().map(|(_, f, _)| f).sum();
    let mut leftover = capacity_us - assigned;
    // Largest fractional remainder first; tenant id breaks ties.
    floors.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    for f in floors.iter_mut() {
        if leftover == 0 {
            break;
        }
        f.1 += 1;
        leftover -= 1;
    }
    floors.into_iter().map(|(t, us, _)| (t, us_to_ms(us))).collect()
}

/// A decision to move a low-urgency blocker off a worker so higher-urgency
/// queued work can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreemptAction {
    pub task_id: TaskId,
    pub from_worker: WorkerId,
    pub dest_worker: WorkerId,
}

/// One queued request's standing for preemption checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueStanding {
    pub task_id: TaskId,
    pub urgency: f64,
    pub enqueue_us: Micros,
}

/// Find blockers to preempt: on each worker, if a request has waited past
/// the block threshold behind a strictly lower-urgency head-of-queue task,
/// the blocker migrates to the least-loaded other worker. Returns at most
/// one action per worker per epoch.
pub fn maybe_preempt(
    queues: &BTreeMap<WorkerId, Vec<QueueStanding>>,
    loads: &BTreeMap<WorkerId, f64>,
    now: Micros,
    block_threshold_ms: f64,
) -> Vec<PreemptAction> {
    let threshold_us = ms_to_us(block_threshold_ms);
    let mut actions = Vec::new();
    for (&worker, queue) in queues {
        let Some(head) = queue.first() else { continue };
        let blocked = queue.iter().skip(1).any(|r| {
            r.urgency > head.urgency && now.saturating_sub(r.enqueue_us) > threshold_us
        });
        if !blocked {
            continue;
        }
        let dest = loads
            .iter()
            .filter(|(&w, _)| w != worker)
            .min_by(|(wa, la), (wb, lb)| la.partial_cmp(lb).unwrap().then(wa.cmp(wb)))
            .map(|(&w, _)| w);
        let Some(dest) = dest else { continue }; // nowhere to go: skip this epoch
        actions.push(PreemptAction { task_id: head.task_id, from_worker: worker, dest_worker: dest });
    }
    actions
}

/// Fraction of tasks finishing by their deadline, per tenant class and
/// overall. Classes with no finished tasks are absent rather than zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SloReport {
    pub per_class: BTreeMap<TenantClass, f64>,
    pub overall: Option<f64>,
}

pub fn slo_attainment(finished: &[(TenantClass, bool)]) -> SloReport {
    let mut counts: BTreeMap<TenantClass, (u64, u64)> = BTreeMap::new();
    for &(class, on_time) in finished {
        let c = counts.entry(class).or_insert((0, 0));
        c.0 += 1;
        if on_time {
            c.1 += 1;
        }
    }
    let per_class = counts
        .iter()
        .map(|(&class, &(n, ok))| (class, ok as f64 / n as f64))
        .collect();
    let overall = if finished.is_empty() {
        None
    } else {
        let ok = finished.iter().filter(|(_, t)| *t).count();
        Some(ok as f64 / finished.len() as f64)
    };
    SloReport { per_class, overall }
}
