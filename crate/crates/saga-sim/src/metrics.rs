//! Metric aggregation and event-log audits. The audits are global checks a
//! finished log must satisfy (causality, capacity, cache conservation,
//! anti-thrash); the useful-KV metric needs lookahead and is therefore
//! computed here in post-processing rather than during the run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::fairness::SloReport;
use crate::model::{EventKind, Micros, SimEvent, TaskId, WorkerId};
use crate::stats::{mean, percentile_nearest_rank, std_dev};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks_finished: u64,
    pub tasks_unfinished: u64,
    pub tct_ms: Vec<f64>,
    pub mean_tct_ms: f64,
    pub std_tct_ms: f64,
    pub p95_tct_ms: f64,
    pub throughput_tasks_per_min: f64,
    pub slo: SloReport,
    /// Fraction of tool-call pauses whose cache was evicted before resume.
    pub eviction_rate: f64,
    pub evictions_total: u64,
    pub regen_tokens_total: u64,
    pub prefill_tokens_total: u64,
    pub steals_total: u64,
    pub steals_per_task: f64,
    pub migrations_total: u64,
    pub preemptions_total: u64,
    /// Fraction of tool waits completing within the granted TTL; absent when
    /// no TTLs were granted.
    pub ttl_coverage: Option<f64>,
    /// Time-averaged fraction of cluster KV capacity holding entries that
    /// were reused later.
    pub useful_kv_fraction: f64,
    pub worker_busy_us: Vec<Micros>,
    pub horizon_us: Micros,
}

impl MetricsReport {
    pub fn finalize_tct(&mut self, horizon_us: Micros) {
        self.horizon_us = horizon_us;
        self.tasks_finished = self.tct_ms.len() as u64;
        if !self.tct_ms.is_empty() {
            self.mean_tct_ms = mean(&self.tct_ms);
            self.std_tct_ms = std_dev(&self.tct_ms);
            let mut sorted = self.tct_ms.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            self.p95_tct_ms = percentile_nearest_rank(&sorted, 95.0);
        }
        let horizon_min = horizon_us as f64 / 60e6;
        if horizon_min > 0.0 {
            self.throughput_tasks_per_min = self.tasks_finished as f64 / horizon_min;
        }
        if self.tasks_finished > 0 {
            self.steals_per_task = self.steals_total as f64 / self.tasks_finished as f64;
        }
    }
}

/// Per-step event times must be strictly ordered prefill < decode < done,
/// and any tool pause must follow the step it ends.
pub fn audit_causality(events: &[SimEvent]) -> Result<(), SimError> {
    #[derive(Default)]
    struct StepTimes {
        prefill: Option<Micros>,
        decode: Option<Micros>,
        done: Option<Micros>,
    }
    let mut steps: BTreeMap<(TaskId, usize), StepTimes> = BTreeMap::new();
    let fail = |what: &str, t: Micros| {
        Err(SimError::validation("events", format!("causality: {what} at {t}us")))
    };
    for e in events {
        match &e.kind {
            EventKind::StepStartPrefill { task_id, step, .. } => {
                steps.entry((*task_id, *step)).or_default().prefill = Some(e.time_us);
            }
            EventKind::StepStartDecode { task_id, step, .. } => {
                let s = steps.entry((*task_id, *step)).or_default();
                match s.prefill {
                    Some(p) if p < e.time_us => s.decode = Some(e.time_us),
                    _ => return fail("decode before prefill end", e.time_us),
                }
            }
            EventKind::StepDone { task_id, step, .. } => {
                let s = steps.entry((*task_id, *step)).or_default();
                match s.decode {
                    Some(d) if d < e.time_us => s.done = Some(e.time_us),
                    _ => return fail("done before decode", e.time_us),
                }
            }
            EventKind::ToolStart { task_id, .. } => {
                let ok = steps
                    .range((*task_id, 0)..=(*task_id, usize::MAX))
                    .last()
                    .and_then(|(_, s)| s.done)
                    .map(|d| d <= e.time_us)
                    .unwrap_or(false);
                if !ok {
                    return fail("tool start before step done", e.time_us);
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Reconstructed per-worker KV usage never exceeds capacity at any event.
/// Residency snapshots come from StepDone (context), PrefetchDone, Evict,
/// and MigrateDone events.
pub fn audit_capacity(
    events: &[SimEvent],
    capacity_bytes: u64,
    bytes_per_token: u64,
) -> Result<(), SimError> {
    let mut resident: BTreeMap<TaskId, (WorkerId, u64)> = BTreeMap::new();
    let check = |resident: &BTreeMap<TaskId, (WorkerId, u64)>, t: Micros| {
        let mut per_worker: BTreeMap<WorkerId, u64> = BTreeMap::new();
        for &(w, b) in resident.values() {
            *per_worker.entry(w).or_default() += b;
        }
        for (&w, &b) in &per_worker {
            if b > capacity_bytes {
                return Err(SimError::validation(
                    "events",
                    format!("capacity: worker {w} holds {b} > {capacity_bytes} bytes at {t}us"),
                ));
            }
        }
        Ok(())
    };
    for e in events {
        match &e.kind {
            EventKind::StepDone { task_id, worker_id, context_tokens, .. } => {
                resident.insert(*task_id, (*worker_id, context_tokens * bytes_per_token));
            }
            EventKind::PrefetchDone { task_id, worker_id, tokens } => {
                resident.insert(*task_id, (*worker_id, tokens * bytes_per_token));
            }
            EventKind::Evict { session_id, .. } => {
                resident.remove(session_id);
            }
            EventKind::MigrateDone { session_id, thief, bytes, .. } => {
                resident.insert(*session_id, (*thief, *bytes));
            }
            _ => {}
        }
        check(&resident, e.time_us)?;
    }
    Ok(())
}

/// A session's cache lives on at most one worker: a step must not run on a
/// worker while the session's entry sits on a different one.
pub fn audit_conservation(events: &[SimEvent]) -> Result<(), SimError> {
    let mut resident: BTreeMap<TaskId, WorkerId> = BTreeMap::new();
    for e in events {
        match &e.kind {
            EventKind::StepStartPrefill { task_id, worker_id, .. } => {
                if let Some(&w) = resident.get(task_id) {
                    if w != *worker_id {
                        return Err(SimError::validation(
                            "events",
                            format!(
                                "conservation: task {task_id} prefills on {worker_id} while cached on {w} at {}us",
                                e.time_us
                            ),
                        ));
                    }
                }
            }
            EventKind::StepDone { task_id, worker_id, .. } => {
                resident.insert(*task_id, *worker_id);
            }
            EventKind::PrefetchDone { task_id, worker_id, .. } => {
                resident.insert(*task_id, *worker_id);
            }
            EventKind::Evict { session_id, .. } => {
                resident.remove(session_id);
            }
            EventKind::MigrateDone { session_id, thief, .. } => {
                resident.insert(*session_id, *thief);
            }
            _ => {}
        }
    }
    Ok(())
}

/// No session appears in two Steal events without an intervening
/// StepStartPrefill or StepDone at its worker.
pub fn audit_anti_thrash(events: &[SimEvent]) -> Result<(), SimError> {
    let mut stolen: BTreeMap<TaskId, Micros> = BTreeMap::new();
    for e in events {
        match &e.kind {
            EventKind::Steal { session_id, .. } => {
                if let Some(prev) = stolen.insert(*session_id, e.time_us) {
                    return Err(SimError::validation(
                        "events",
                        format!(
                            "anti-thrash: session {session_id} stolen at {}us and again at {}us without service",
                            prev, e.time_us
                        ),
                    ));
                }
            }
            EventKind::StepStartPrefill { task_id, .. } | EventKind::StepDone { task_id, .. } => {
                stolen.remove(task_id);
            }
            _ => {}
        }
    }
    Ok(())
}

/// Time-integral of resident bytes that are reused later, over total
/// capacity x horizon. A residency segment counts as useful from one access
/// to the next access that hits it; tails ending in eviction, task finish,
/// or the horizon are not useful.
pub fn useful_kv_fraction(
    events: &[SimEvent],
    total_capacity_bytes: u64,
    bytes_per_token: u64,
    horizon_us: Micros,
) -> f64 {
    if total_capacity_bytes == 0 || horizon_us == 0 {
        return 0.0;
    }
    // Open segment per session: (start, bytes).
    let mut open: BTreeMap<TaskId, (Micros, u64)> = BTreeMap::new();
    let mut useful_byte_us: f64 = 0.0;
    for e in events {
        match &e.kind {
            EventKind::StepStartPrefill { task_id, regen_tokens, prompt_tokens, .. } => {
                // A hit (partial regen) closes the open segment as useful.
                if let Some((start, bytes)) = open.remove(task_id) {
                    if regen_tokens < prompt_tokens {
                        useful_byte_us += bytes as f64 * e.time_us.saturating_sub(start) as f64;
                    }
                }
            }
            EventKind::StepDone { task_id, context_tokens, .. } => {
                open.insert(*task_id, (e.time_us, context_tokens * bytes_per_token));
            }
            EventKind::Evict { session_id, .. } | EventKind::TaskFinish { task_id: session_id, .. } => {
                open.remove(session_id); // dead tail: not useful
            }
            EventKind::MigrateDone { session_id, bytes, .. } => {
                // Migration preserves the entry; restart the segment at the
                // destination (transfer time itself is not counted useful).
                if open.remove(session_id).is_some() {
                    open.insert(*session_id, (e.time_us, *bytes));
                }
            }
            _ => {}
        }
    }
    useful_byte_us / (total_capacity_bytes as f64 * horizon_us as f64)
}

/// Run every log audit.
pub fn audit_all(
    events: &[SimEvent],
    capacity_bytes: u64,
    bytes_per_token: u64,
) -> Result<(), SimError> {
    audit_causality(events)?;
    audit_capacity(events, capacity_bytes, bytes_per_token)?;
    audit_conservation(events)?;
    audit_anti_thrash(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToolKind;

    fn ev(time_us: Micros, seq: u64, kind: EventKind) -> SimEvent {
        SimEvent { time_us, seq, kind }
    }

    fn step_events(task: TaskId, worker: WorkerId, step: usize, t0: Micros) -> Vec<SimEvent> {
        vec![
            ev(t0, 0, EventKind::StepStartPrefill {
                task_id: task, worker_id: worker, step, prompt_tokens: 100, regen_tokens: 100,
            }),
            ev(t0 + 10, 1, EventKind::StepStartDecode {
                task_id: task, worker_id: worker, step, output_tokens: 10,
            }),
            ev(t0 + 20, 2, EventKind::StepDone {
                task_id: task, worker_id: worker, step, context_tokens: 110,
            }),
        ]
    }

    #[test]
    fn causality_accepts_ordered_rejects_inverted() {
        let good = step_events(1, 0, 0, 100);
        audit_causality(&good).unwrap();
        let mut bad = good.clone();
        bad.swap(0, 1);
        assert!(audit_causality(&bad).is_err());
    }

    #[test]
    fn capacity_audit_flags_overflow() {
        let events = vec![ev(0, 0, EventKind::StepDone {
            task_id: 1, worker_id: 0, step: 0, context_tokens: 1_000,
        })];
        audit_capacity(&events, 1_000 * 10, 10).unwrap();
        assert!(audit_capacity(&events, 999 * 10, 10).is_err());
    }

    #[test]
    fn conservation_flags_split_residency() {
        let mut events = step_events(1, 0, 0, 0);
        events.push(ev(100, 3, EventKind::StepStartPrefill {
            task_id: 1, worker_id: 1, step: 1, prompt_tokens: 200, regen_tokens: 200,
        }));
        assert!(audit_conservation(&events).is_err());
        // Evicting at the old worker first makes it legal.
        let mut fixed = step_events(1, 0, 0, 0);
        fixed.push(ev(50, 3, EventKind::Evict { session_id: 1, worker_id: 0, tokens: 110, bytes: 1_100 }));
        fixed.push(ev(100, 4, EventKind::StepStartPrefill {
            task_id: 1, worker_id: 1, step: 1, prompt_tokens: 200, regen_tokens: 200,
        }));
        audit_conservation(&fixed).unwrap();
    }

    #[test]
    fn anti_thrash_flags_double_steal() {
        let steal = |t: Micros| ev(t, 0, EventKind::Steal { session_id: 7, thief: 1, victim: 0 });
        assert!(audit_anti_thrash(&[steal(0), steal(100)]).is_err());
        let mut with_service = vec![steal(0)];
        with_service.extend(step_events(7, 1, 3, 50));
        with_service.push(steal(200));
        audit_anti_thrash(&with_service).unwrap();
    }

    #[test]
    fn useful_kv_counts_only_reused_intervals() {
        let bpt = 10;
        let mut events = step_events(1, 0, 0, 0); // StepDone at t=20, 110 tokens
        // Hit at t = 1020: the 1000us interval at 1100 bytes is useful.
        events.push(ev(1_020, 3, EventKind::StepStartPrefill {
            task_id: 1, worker_id: 0, step: 1, prompt_tokens: 150, regen_tokens: 40,
        }));
        events.push(ev(1_030, 4, EventKind::StepStartDecode { task_id: 1, worker_id: 0, step: 1, output_tokens: 10 }));
        events.push(ev(1_040, 5, EventKind::StepDone { task_id: 1, worker_id: 0, step: 1, context_tokens: 160 }));
        events.push(ev(2_000, 6, EventKind::TaskFinish { task_id: 1, tct_us: 2_000, on_time: true }));
        let capacity = 10_000u64;
        let horizon = 10_000u64;
        let f = useful_kv_fraction(&events, capacity, bpt, horizon);
        let expect = (110.0 * bpt as f64 * 1_000.0) / (capacity as f64 * horizon as f64);
        assert!((f - expect).abs() < 1e-12, "f = {f}, expect = {expect}");
    }

    #[test]
    fn useful_kv_miss_interval_not_counted() {
        let bpt = 10;
        let mut events = step_events(1, 0, 0, 0);
        events.push(ev(500, 3, EventKind::Evict { session_id: 1, worker_id: 0, tokens: 110, bytes: 1_100 }));
        // Cold re-prefill (full regen): not a hit.
        events.push(ev(1_020, 4, EventKind::StepStartPrefill {
            task_id: 1, worker_id: 0, step: 1, prompt_tokens: 150, regen_tokens: 150,
        }));
        let f = useful_kv_fraction(&events, 10_000, bpt, 10_000);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn finalize_tct_summary() {
        let mut m = MetricsReport::default();
        m.tct_ms = vec![100.0, 200.0, 300.0];
        m.steals_total = 6;
        m.finalize_tct(60_000_000); // 1 min
        assert_eq!(m.tasks_finished, 3);
        assert_eq!(m.mean_tct_ms, 200.0);
        assert_eq!(m.throughput_tasks_per_min, 3.0);
        assert_eq!(m.steals_per_task, 2.0);
    }
}
