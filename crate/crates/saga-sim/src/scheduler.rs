//! Cluster-level routing with session affinity, randomized work stealing,
//! and the migration cost model.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::{LatencyDistribution, Micros, TaskId, WorkerId, WorkerState};

/// Load threshold below which the affinity worker keeps the session.
pub const DEFAULT_THETA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StealConfig {
    pub enabled: bool,
    /// A worker must sit idle this long before it may steal.
    pub t_idle_ms: f64,
    /// Steal only when max load / min load exceeds this ratio.
    pub r_max: f64,
    pub migrate_latency: LatencyDistribution,
}

impl Default for StealConfig {
    fn default() -> Self {
        StealConfig {
            enabled: true,
            t_idle_ms: 100.0,
            r_max: 2.0,
            migrate_latency: LatencyDistribution::from_mean_p95(230.0, 890.0),
        }
    }
}

impl StealConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.t_idle_ms <= 0.0 {
            return Err(SimError::validation("steal.t_idle_ms", "must be > 0"));
        }
        if self.r_max <= 1.0 {
            return Err(SimError::validation("steal.r_max", "must be > 1"));
        }
        self.migrate_latency.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub workers: Vec<WorkerState>,
    pub session_affinity: BTreeMap<TaskId, WorkerId>,
    pub epoch_counter: u64,
    /// When each worker last became idle; None while it has work.
    pub idle_since_us: Vec<Option<Micros>>,
}

impl ClusterState {
    pub fn new(num_workers: usize, kv_capacity_bytes: u64) -> Self {
        ClusterState {
            workers: (0..num_workers)
                .map(|i| WorkerState::new(i as WorkerId, kv_capacity_bytes))
                .collect(),
            session_affinity: BTreeMap::new(),
            epoch_counter: 0,
            idle_since_us: vec![Some(0); num_workers],
        }
    }

    pub fn worker(&self, id: WorkerId) -> &WorkerState {
        &self.workers[id as usize]
    }

    pub fn worker_mut(&mut self, id: WorkerId) -> &mut WorkerState {
        &mut self.workers[id as usize]
    }

    /// Least-loaded worker, ties broken by lowest id.
    pub fn least_loaded(&self) -> WorkerId {
        self.workers
            .iter()
            .min_by(|a, b| {
                a.load
                    .partial_cmp(&b.load)
                    .unwrap()
                    .then(a.worker_id.cmp(&b.worker_id))
            })
            .expect("cluster has at least one worker")
            .worker_id
    }
}

/// Route a session's next step: the affinity worker when it is below the
/// load threshold and still holds the session's cache, otherwise the
/// least-loaded worker. Affinity follows the chosen worker.
pub fn route(cluster: &mut ClusterState, session: TaskId, theta: f64) -> WorkerId {
    assert!(!cluster.workers.is_empty(), "route requires >= 1 worker");
    let chosen = match cluster.session_affinity.get(&session) {
        Some(&w) if cluster.worker(w).load < theta && cluster.worker(w).cached(session) => w,
        _ => cluster.least_loaded(),
    };
    cluster.session_affinity.insert(session, chosen);
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StealAction {
    pub thief: WorkerId,
    pub victim: WorkerId,
    pub session: TaskId,
}

/// Decide whether an idle worker should steal. Fires only when some worker
/// has been idle at least `t_idle` and the cluster load imbalance exceeds
/// `r_max`. The victim is drawn uniformly from the overloaded set; the stolen
/// session is the victim's head-of-queue session. Sessions in `cooldown`
/// (migrated without intervening service) are never re-stolen.
pub fn maybe_steal(
    cluster: &ClusterState,
    cfg: &StealConfig,
    now: Micros,
    cooldown: &BTreeSet<TaskId>,
    rng: &mut impl Rng,
) -> Option<StealAction> {
    if !cfg.enabled || cluster.workers.len() < 2 {
        return None;
    }
    let t_idle_us = crate::model::ms_to_us(cfg.t_idle_ms);
    let thief = cluster
        .workers
        .iter()
        .zip(&cluster.idle_since_us)
        .filter(|(_, idle)| idle.map(|t| now.saturating_sub(t) >= t_idle_us).unwrap_or(false))
        .map(|(w, _)| w.worker_id)
        .next()?;

    let min_load = cluster.workers.iter().map(|w| w.load).fold(f64::INFINITY, f64::min);
    let max_load = cluster.workers.iter().map(|w| w.load).fold(0.0, f64::max);
    let imbalanced = if min_load <= 0.0 { max_load > 0.0 } else { max_load / min_load > cfg.r_max };
    if !imbalanced {
        return None;
    }
    let cutoff = cfg.r_max * min_load;
    let overloaded: Vec<&WorkerState> = cluster
        .workers
        .iter()
        .filter(|w| w.worker_id != thief && w.load > cutoff && !w.queue.is_empty())
        .collect();
    if overloaded.is_empty() {
        return None;
    }
    let victim = overloaded[rng.gen_range(0..overloaded.len())];
    let session = victim.queue.front().map(|r| r.task_id)?;
    if cooldown.contains(&session) {
        return None;
    }
    Some(StealAction { thief, victim: victim.worker_id, session })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ms_to_us, CacheEntry, QueuedRequest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cluster(loads: &[f64]) -> ClusterState {
        let mut c = ClusterState::new(loads.len(), 1 << 30);
        for (w, &l) in c.workers.iter_mut().zip(loads) {
            w.load = l;
        }
        c
    }

    fn cache_session(c: &mut ClusterState, w: WorkerId, s: TaskId) {
        let e = CacheEntry::new(s, w, 100, 10, 0);
        c.worker_mut(w).resident.insert(s, e);
        c.session_affinity.insert(s, w);
    }

    fn enqueue(c: &mut ClusterState, w: WorkerId, s: TaskId) {
        c.worker_mut(w).queue.push_back(QueuedRequest {
            task_id: s,
            tenant_id: 0,
            step_index: 0,
            prompt_tokens: 100,
            output_tokens: 10,
            enqueue_us: 0,
        });
    }

    #[test]
    fn route_affinity_when_cached_and_under_threshold() {
        let mut c = cluster(&[0.1, 0.2, 0.3, 0.5]);
        cache_session(&mut c, 3, 7);
        assert_eq!(route(&mut c, 7, 0.8), 3);
    }

    #[test]
    fn route_breaks_affinity_over_threshold() {
        let mut c = cluster(&[0.1, 0.2, 0.3, 0.9]);
        cache_session(&mut c, 3, 7);
        assert_eq!(route(&mut c, 7, 0.8), 0);
        // Affinity follows the new placement.
        assert_eq!(c.session_affinity[&7], 0);
    }

    #[test]
    fn route_new_session_least_loaded_lowest_id_tie() {
        let mut c = cluster(&[0.4, 0.2, 0.2]);
        assert_eq!(route(&mut c, 42, 0.8), 1);
    }

    #[test]
    fn steal_fires_on_idle_and_imbalance() {
        let mut c = cluster(&[0.9, 0.0]);
        c.idle_since_us = vec![None, Some(0)];
        enqueue(&mut c, 0, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = maybe_steal(&c, &StealConfig::default(), ms_to_us(120.0), &BTreeSet::new(), &mut rng)
            .unwrap();
        assert_eq!(a, StealAction { thief: 1, victim: 0, session: 5 });
    }

    #[test]
    fn steal_suppressed_below_ratio() {
        let mut c = cluster(&[0.6, 0.4]);
        c.idle_since_us = vec![None, Some(0)];
        enqueue(&mut c, 0, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(maybe_steal(&c, &StealConfig::default(), ms_to_us(120.0), &BTreeSet::new(), &mut rng)
            .is_none());
    }

    #[test]
    fn steal_suppressed_before_t_idle() {
        let mut c = cluster(&[0.9, 0.0]);
        c.idle_since_us = vec![None, Some(ms_to_us(100.0))];
        enqueue(&mut c, 0, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(maybe_steal(&c, &StealConfig::default(), ms_to_us(150.0), &BTreeSet::new(), &mut rng)
            .is_none());
    }

    #[test]
    fn cooldown_blocks_resteal() {
        let mut c = cluster(&[0.9, 0.0]);
        c.idle_since_us = vec![None, Some(0)];
        enqueue(&mut c, 0, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let cd: BTreeSet<TaskId> = [5].into_iter().collect();
        assert!(maybe_steal(&c, &StealConfig::default(), ms_to_us(120.0), &cd, &mut rng).is_none());
    }

    #[test]
    fn disabled_never_steals() {
        let mut c = cluster(&[0.9, 0.0]);
        c.idle_since_us = vec![None, Some(0)];
        enqueue(&mut c, 0, 5);
        let cfg = StealConfig { enabled: false, ..StealConfig::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(maybe_steal(&c, &cfg, ms_to_us(120.0), &BTreeSet::new(), &mut rng).is_none());
    }

    #[test]
    fn migration_latency_fit_matches_reported_figures() {
        let cfg = StealConfig::default();
        if let LatencyDistribution::LogNormal { mu, sigma } = cfg.migrate_latency {
            let mean = (mu + sigma * sigma / 2.0).exp();
            let p95 = cfg.migrate_latency.quantile_ms(0.95);
            assert!((mean - 230.0).abs() / 230.0 < 0.01, "mean = {mean}");
            assert!((p95 - 890.0).abs() / 890.0 < 0.01, "p95 = {p95}");
        } else {
            panic!("expected log-normal default");
        }
    }
}
