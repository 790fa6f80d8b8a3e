//! Deterministic discrete-event engine: admission, the serial prefill
//! channel and parallel decode, tool pauses with TTL grants, eviction under
//! capacity pressure, speculative prefetch, work stealing with migration,
//! and epoch-based fair-share admission budgets.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::aeg::{reuse_probability, ObsLenModel};
use crate::cache::{
    compute_ttl, memory_pressure, select_victims, EvictionPolicy, LatencyHistory,
};
use crate::config::SimConfig;
use crate::error::SimError;
use crate::fairness::{
    afs_score, allocate_epoch, maybe_preempt, work_remain, FairnessPolicy, QueueStanding,
};
use crate::metrics::{useful_kv_fraction, MetricsReport};
use crate::model::{
    ms_to_us, us_to_ms, CacheEntry, EventKind, Micros, QueuedRequest, SimEvent, TaskId, TenantId,
    ToolKind, WorkerId,
};
use crate::scheduler::{maybe_steal, route, ClusterState, StealAction};
use crate::workload::{generate_workload, Workload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub events: Vec<SimEvent>,
    pub metrics: MetricsReport,
}

/// Generate the configured workload and simulate it.
pub fn run(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let workload = generate_workload(&cfg.workload, &cfg.cost, &cfg.tools, cfg.seed)?;
    run_workload(cfg, &workload)
}

/// Simulate a pre-generated workload under the configured policies.
pub fn run_workload(cfg: &SimConfig, workload: &Workload) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    Engine::new(cfg, workload)?.run()
}

#[derive(Debug, Clone, PartialEq)]
enum Pending {
    Arrival { task: TaskId },
    PrefillDone { worker: WorkerId, task: TaskId },
    DecodeDone { worker: WorkerId, task: TaskId },
    ToolDone { task: TaskId, tool: ToolKind, wait_us: Micros },
    PrefetchFire { worker: WorkerId, task: TaskId, attempts: u8 },
    PrefetchDone { worker: WorkerId, task: TaskId, tokens: u64 },
    MigrateDone { session: TaskId, thief: WorkerId, victim: WorkerId, request: Option<QueuedRequest> },
    EpochTick,
}

impl Pending {
    fn ordinal(&self) -> u8 {
        match self {
            Pending::Arrival { .. } => 0,
            Pending::PrefillDone { .. } => 1,
            Pending::DecodeDone { .. } => 2,
            Pending::ToolDone { .. } => 3,
            Pending::PrefetchFire { .. } => 4,
            Pending::PrefetchDone { .. } => 5,
            Pending::MigrateDone { .. } => 6,
            Pending::EpochTick => 7,
        }
    }

    fn key(&self) -> u64 {
        match self {
            Pending::Arrival { task }
            | Pending::PrefillDone { task, .. }
            | Pending::DecodeDone { task, .. }
            | Pending::ToolDone { task, .. }
            | Pending::PrefetchFire { task, .. }
            | Pending::PrefetchDone { task, .. } => *task,
            Pending::MigrateDone { session, .. } => *session,
            Pending::EpochTick => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Scheduled {
    time: Micros,
    ordinal: u8,
    key: u64,
    seq: u64,
    pending: Pending,
}

impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.ordinal, self.key, self.seq).cmp(&(
            other.time,
            other.ordinal,
            other.key,
            other.seq,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskState {
    Pending,
    Queued,
    Prefilling,
    Decoding,
    Paused,
    Finished,
}

struct TaskRt {
    task: crate::model::Task,
    step: usize,
    worker: WorkerId,
    state: TaskState,
    pause_started: Micros,
    pause_tool: Option<ToolKind>,
    pause_expected_end: Micros,
    pause_evicted: bool,
    prefetch_scheduled: bool,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    cluster: ClusterState,
    tasks: BTreeMap<TaskId, TaskRt>,
    heap: BinaryHeap<Reverse<Scheduled>>,
    sched_seq: u64,
    log: Vec<SimEvent>,
    rng: ChaCha20Rng,
    now: Micros,
    horizon: Micros,
    epoch_us: Micros,
    capacity_bytes: u64,
    prefill_busy_until: Vec<Micros>,
    in_progress: Vec<BTreeSet<TaskId>>,
    busy_us: Vec<Micros>,
    history: LatencyHistory,
    obs_model: ObsLenModel,
    /// Remaining admission budget per tenant this epoch, GPU-us. None = FCFS.
    budgets: Option<BTreeMap<TenantId, f64>>,
    cooldown: BTreeSet<TaskId>,
    in_flight: BTreeMap<TaskId, CacheEntry>,
    tenant_class: BTreeMap<TenantId, crate::model::TenantClass>,
    // counters
    pauses_total: u64,
    pauses_evicted: u64,
    ttl_granted: u64,
    ttl_covered: u64,
    regen_total: u64,
    prefill_total: u64,
    evictions: u64,
    steals: u64,
    migrations: u64,
    preemptions: u64,
    finished: Vec<(crate::model::TenantClass, bool)>,
    tct_ms: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, workload: &Workload) -> Result<Self, SimError> {
        let n = cfg.cluster.num_workers;
        let capacity_bytes = cfg.kv_capacity_bytes();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x51_4D); // distinct from workload-generation lanes
        let mut engine = Engine {
            cfg,
            cluster: ClusterState::new(n, capacity_bytes),
            tasks: BTreeMap::new(),
            heap: BinaryHeap::new(),
            sched_seq: 0,
            log: Vec::new(),
            rng,
            now: 0,
            horizon: ms_to_us(cfg.horizon_s * 1e3),
            epoch_us: ms_to_us(cfg.epoch_ms),
            capacity_bytes,
            prefill_busy_until: vec![0; n],
            in_progress: vec![BTreeSet::new(); n],
            busy_us: vec![0; n],
            history: LatencyHistory::default(),
            obs_model: ObsLenModel::default(),
            budgets: None,
            cooldown: BTreeSet::new(),
            in_flight: BTreeMap::new(),
            tenant_class: workload
                .tenants
                .iter()
                .map(|t| (t.tenant_id, t.class))
                .collect(),
            pauses_total: 0,
            pauses_evicted: 0,
            ttl_granted: 0,
            ttl_covered: 0,
            regen_total: 0,
            prefill_total: 0,
            evictions: 0,
            steals: 0,
            migrations: 0,
            preemptions: 0,
            finished: Vec::new(),
            tct_ms: Vec::new(),
        };
        for task in &workload.tasks {
            if task.submit_us > engine.horizon {
                continue;
            }
            engine.tasks.insert(
                task.task_id,
                TaskRt {
                    task: task.clone(),
                    step: 0,
                    worker: 0,
                    state: TaskState::Pending,
                    pause_started: 0,
                    pause_tool: None,
                    pause_expected_end: 0,
                    pause_evicted: false,
                    prefetch_scheduled: false,
                },
            );
            engine.schedule(task.submit_us, Pending::Arrival { task: task.task_id });
        }
        engine.schedule(engine.epoch_us, Pending::EpochTick);
        Ok(engine)
    }

    fn schedule(&mut self, time: Micros, pending: Pending) {
        let s = Scheduled {
            time,
            ordinal: pending.ordinal(),
            key: pending.key(),
            seq: self.sched_seq,
            pending,
        };
        self.sched_seq += 1;
        self.heap.push(Reverse(s));
    }

    fn log_event(&mut self, kind: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(SimEvent { time_us: self.now, seq, kind });
    }

    fn run(mut self) -> Result<SimOutput, SimError> {
        while let Some(Reverse(s)) = self.heap.pop() {
            if s.time > self.horizon {
                break;
            }
            self.now = s.time;
            match s.pending {
                Pending::Arrival { task } => self.on_arrival(task)?,
                Pending::PrefillDone { worker, task } => self.on_prefill_done(worker, task)?,
                Pending::DecodeDone { worker, task } => self.on_decode_done(worker, task)?,
                Pending::ToolDone { task, tool, wait_us } => self.on_tool_done(task, tool, wait_us)?,
                Pending::PrefetchFire { worker, task, attempts } => {
                    self.on_prefetch_fire(worker, task, attempts)
                }
                Pending::PrefetchDone { worker, task, tokens } => {
                    self.on_prefetch_done(worker, task, tokens)
                }
                Pending::MigrateDone { session, thief, victim, request } => {
                    self.on_migrate_done(session, thief, victim, request)?
                }
                Pending::EpochTick => self.on_epoch_tick()?,
            }
        }
        self.finish()
    }

    // -- event handlers -----------------------------------------------------

    fn on_arrival(&mut self, task_id: TaskId) -> Result<(), SimError> {
        let tenant = self.tasks[&task_id].task.tenant_id;
        self.log_event(EventKind::TaskArrive { task_id, tenant_id: tenant });
        let worker = self.route_for(task_id);
        self.enqueue(worker, task_id, false);
        self.try_dispatch(worker)
    }

    fn route_for(&mut self, task_id: TaskId) -> WorkerId {
        if let Some(pin) = self.cfg.cluster.pin_worker {
            // Pinned synthetic: sessions start at the pin and thereafter
            // follow wherever migration placed them.
            let w = self
                .cluster
                .session_affinity
                .get(&task_id)
                .copied()
                .unwrap_or(pin);
            self.cluster.session_affinity.insert(task_id, w);
            return w;
        }
        route(&mut self.cluster, task_id, self.cfg.theta)
    }

    fn enqueue(&mut self, worker: WorkerId, task_id: TaskId, continuing: bool) {
        let rt = self.tasks.get_mut(&task_id).unwrap();
        let step = rt.step;
        let req = QueuedRequest {
            task_id,
            tenant_id: rt.task.tenant_id,
            step_index: step,
            prompt_tokens: rt.task.prompt_tokens_at(step),
            output_tokens: rt.task.plan[step].output_tokens,
            enqueue_us: self.now,
        };
        rt.state = TaskState::Queued;
        rt.worker = worker;
        let q = &mut self.cluster.worker_mut(worker).queue;
        // Depth-first runs a task to completion: continuing steps go to the
        // queue head so the task is re-admitted before anything new.
        if continuing && self.cfg.strategy == crate::config::Strategy::Dfs {
            q.push_front(req);
        } else {
            q.push_back(req);
        }
        self.cluster.idle_since_us[worker as usize] = None;
    }

    fn slots_free(&self, worker: WorkerId) -> bool {
        match self.cfg.strategy.concurrency() {
            None => true,
            Some(limit) => self.in_progress[worker as usize].len() < limit,
        }
    }

    fn try_dispatch(&mut self, worker: WorkerId) -> Result<(), SimError> {
        loop {
            if self.prefill_busy_until[worker as usize] > self.now {
                return Ok(());
            }
            let Some(idx) = self.pick_queue_index(worker) else { return Ok(()) };
            let req = self
                .cluster
                .worker_mut(worker)
                .queue
                .remove(idx)
                .expect("picked index in range");
            if self.cluster.worker(worker).queue.is_empty() {
                self.cluster.idle_since_us[worker as usize] = Some(self.now);
            }
            self.admit_step(worker, req)?;
        }
    }

    fn pick_queue_index(&self, worker: WorkerId) -> Option<usize> {
        let queue = &self.cluster.worker(worker).queue;
        let slots = self.slots_free(worker);
        // Shares order work, they never idle the worker: the runnable request
        // whose tenant is furthest under its share (largest remaining budget,
        // deficits included) goes first, FIFO otherwise. Budgets are compared
        // in rounds -- one epoch of cluster capacity for every active tenant.
        // A deficit shallower than a round repays itself from the tenant's
        // own refills without reordering the queue; only tenants so deep in
        // debt that whole rounds cannot repay them sort behind the pack.
        // Without budgets this degrades to plain FIFO.
        let contenders = self.budgets.as_ref().map(|b| b.len().max(1)).unwrap_or(1) as u64;
        let quantum =
            (ms_to_us(self.cfg.epoch_ms) * self.cluster.workers.len() as u64 * contenders) as f64;
        let mut best: Option<(i64, usize)> = None;
        for (idx, req) in queue.iter().enumerate() {
            let continuing = self.in_progress[worker as usize].contains(&req.task_id);
            if !continuing && !slots {
                // New admissions wait for a slot; steps of tasks already
                // holding a slot proceed regardless of queue position.
                continue;
            }
            let Some(budgets) = &self.budgets else { return Some(idx) };
            let remaining = budgets.get(&req.tenant_id).copied().unwrap_or(0.0);
            let bucket = (remaining / quantum).floor() as i64;
            if best.map_or(true, |(b, _)| bucket > b) {
                best = Some((bucket, idx));
            }
        }
        best.map(|(_, idx)| idx)
    }

    fn admit_step(&mut self, worker: WorkerId, req: QueuedRequest) -> Result<(), SimError> {
        let task_id = req.task_id;
        let step = req.step_index;
        let prompt = req.prompt_tokens;
        let output = req.output_tokens;
        let bpt = self.cfg.cost.bytes_per_token;

        // The cache must live on exactly one worker: residency elsewhere is
        // dropped before this worker prefills from scratch.
        for other in 0..self.cluster.workers.len() as WorkerId {
            if other != worker {
                if let Some(e) = self.cluster.worker_mut(other).resident.remove(&task_id) {
                    self.log_event(EventKind::Evict {
                        session_id: task_id,
                        worker_id: other,
                        tokens: e.tokens,
                        bytes: e.bytes,
                    });
                    self.evictions += 1;
                }
            }
        }

        let cached = self
            .cluster
            .worker(worker)
            .resident
            .get(&task_id)
            .map(|e| e.tokens.min(prompt))
            .unwrap_or(0);
        let regen = prompt - cached;

        // Reserve the full post-step context now (prompt + output KV).
        let context_tokens = prompt + output;
        let need_bytes = context_tokens * bpt;
        let have_bytes = self
            .cluster
            .worker(worker)
            .resident
            .get(&task_id)
            .map(|e| e.bytes)
            .unwrap_or(0);
        let used = self.cluster.worker(worker).used_bytes();
        let free = self.capacity_bytes.saturating_sub(used);
        if need_bytes > have_bytes + free {
            let shortfall = need_bytes - have_bytes - free;
            let victims = select_victims(
                self.cluster.worker(worker),
                shortfall,
                self.cfg.policy,
                self.now,
                &self.cfg.weights,
                Some(task_id),
            )?;
            for v in victims {
                self.evict(worker, v);
            }
        }

        let w = self.cluster.worker_mut(worker);
        let entry = w
            .resident
            .entry(task_id)
            .or_insert_with(|| CacheEntry::new(task_id, worker, 0, bpt, self.now));
        entry.worker_id = worker;
        entry.set_tokens(context_tokens, bpt);
        entry.last_access_us = self.now;
        entry.ttl_expiry_us = None;

        self.log_event(EventKind::StepStartPrefill {
            task_id,
            worker_id: worker,
            step,
            prompt_tokens: prompt,
            regen_tokens: regen,
        });
        self.regen_total += regen;
        self.prefill_total += prompt;
        self.cooldown.remove(&task_id);

        let prefill_dur = self.cfg.cost.prefill_us(regen);
        let decode_dur = self.cfg.cost.decode_us(output);
        self.prefill_busy_until[worker as usize] = self.now + prefill_dur;
        self.busy_us[worker as usize] += prefill_dur + decode_dur;
        // Budget currency is GPU work (prefill + decode), the same units the
        // urgency scores are computed in.
        if let Some(budgets) = &mut self.budgets {
            if let Some(b) = budgets.get_mut(&req.tenant_id) {
                *b -= (prefill_dur + decode_dur) as f64;
            }
        }
        self.in_progress[worker as usize].insert(task_id);
        let rt = self.tasks.get_mut(&task_id).unwrap();
        rt.state = TaskState::Prefilling;
        rt.worker = worker;
        rt.prefetch_scheduled = false;
        self.schedule(self.now + prefill_dur, Pending::PrefillDone { worker, task: task_id });
        Ok(())
    }

    fn evict(&mut self, worker: WorkerId, session: TaskId) {
        let Some(e) = self.cluster.worker_mut(worker).resident.remove(&session) else {
            return;
        };
        self.log_event(EventKind::Evict {
            session_id: session,
            worker_id: worker,
            tokens: e.tokens,
            bytes: e.bytes,
        });
        self.evictions += 1;
        let (paused, scheduled, expected_end) = {
            let Some(rt) = self.tasks.get_mut(&session) else { return };
            let paused = rt.state == TaskState::Paused;
            if paused && !rt.pause_evicted {
                rt.pause_evicted = true;
                self.pauses_evicted += 1;
            }
            (paused, rt.prefetch_scheduled, rt.pause_expected_end)
        };
        // Speculatively warm the cache back before the predicted resume.
        if paused && !scheduled && self.cfg.prefetch {
            let tokens = self.tasks[&session].task.context_tokens;
            let lead = self.cfg.cost.prefill_us(tokens);
            let fire = expected_end.saturating_sub(lead).max(self.now);
            self.tasks.get_mut(&session).unwrap().prefetch_scheduled = true;
            self.schedule(fire, Pending::PrefetchFire { worker, task: session, attempts: 0 });
        }
    }

    fn on_prefill_done(&mut self, worker: WorkerId, task_id: TaskId) -> Result<(), SimError> {
        let (step, output) = {
            let rt = self.tasks.get_mut(&task_id).unwrap();
            rt.state = TaskState::Decoding;
            (rt.step, rt.task.plan[rt.step].output_tokens)
        };
        self.log_event(EventKind::StepStartDecode {
            task_id,
            worker_id: worker,
            step,
            output_tokens: output,
        });
        let decode_dur = self.cfg.cost.decode_us(output);
        self.schedule(self.now + decode_dur, Pending::DecodeDone { worker, task: task_id });
        self.try_dispatch(worker)
    }

    fn on_decode_done(&mut self, worker: WorkerId, task_id: TaskId) -> Result<(), SimError> {
        let bpt = self.cfg.cost.bytes_per_token;
        let (step, context, last) = {
            let rt = self.tasks.get_mut(&task_id).unwrap();
            let step = rt.step;
            let context = rt.task.context_after(step);
            rt.task.context_tokens = context;
            rt.task.steps_done += 1;
            (step, context, step + 1 == rt.task.plan.len())
        };
        if let Some(e) = self.cluster.worker_mut(worker).resident.get_mut(&task_id) {
            e.set_tokens(context, bpt);
            e.last_access_us = self.now;
        }
        self.log_event(EventKind::StepDone { task_id, worker_id: worker, step, context_tokens: context });

        if last {
            let rt = self.tasks.get_mut(&task_id).unwrap();
            rt.state = TaskState::Finished;
            let tct = self.now - rt.task.submit_us;
            let on_time = self.now <= rt.task.deadline_us;
            let class = self
                .tenant_class
                .get(&rt.task.tenant_id)
                .copied()
                .unwrap_or(crate::model::TenantClass::Medium);
            // Finished sessions leave their (now dead) entry resident until a
            // policy evicts it; recency-only baselines pay for that.
            if let Some(e) = self.cluster.worker_mut(worker).resident.get_mut(&task_id) {
                e.reuse_prob = 0.0;
            }
            self.in_progress[worker as usize].remove(&task_id);
            self.log_event(EventKind::TaskFinish { task_id, tct_us: tct, on_time });
            self.finished.push((class, on_time));
            self.tct_ms.push(us_to_ms(tct));
        } else {
            let (node, tool, next_node) = {
                let rt = self.tasks.get(&task_id).unwrap();
                let node = rt.task.plan[step].node;
                let next = rt.task.plan[step + 1].node;
                let tool = rt.task.aeg.tool_of.get(&node).cloned().unwrap_or(ToolKind::FileOps);
                (node, tool, next)
            };
            let _ = node;
            // Reuse estimate for the pause, from the graph at the node just
            // completed (before advancing).
            let reuse = {
                let rt = self.tasks.get(&task_id).unwrap();
                reuse_probability(&rt.task, &rt.task.aeg, &self.obs_model)
            };
            let live = self.cluster.worker(worker).live_bytes();
            let ttl_us = if self.cfg.ttl_enabled && self.cfg.policy == EvictionPolicy::WaLru {
                let m = memory_pressure(live, self.capacity_bytes, &self.cfg.ttl);
                compute_ttl(&tool, &self.history, &self.cfg.tools, &self.cfg.ttl, m)
            } else {
                0
            };
            if let Some(e) = self.cluster.worker_mut(worker).resident.get_mut(&task_id) {
                e.reuse_prob = reuse;
                e.ttl_expiry_us = if ttl_us > 0 { Some(self.now + ttl_us) } else { None };
            }
            self.log_event(EventKind::ToolStart { task_id, worker_id: worker, tool: tool.clone(), ttl_us });
            // Waits were drawn at workload generation; replaying the same
            // draws under every policy variant keeps paired comparisons from
            // drowning in latency-sampling noise.
            let wait_ms = self.tasks[&task_id].task.plan[step].tool_wait_ms;
            let wait_us = ms_to_us(wait_ms);
            if ttl_us > 0 {
                self.ttl_granted += 1;
                if wait_us <= ttl_us {
                    self.ttl_covered += 1;
                }
            }
            self.pauses_total += 1;
            // Aim the resume estimate above the median: firing a prefetch
            // late merely degrades to the synchronous path, while firing
            // early wastes channel time on an entry that can be evicted
            // again before the tool returns.
            let expected = self
                .cfg
                .tools
                .get(&tool)
                .map(|d| ms_to_us(d.quantile_ms(0.75)))
                .unwrap_or(0);
            {
                let rt = self.tasks.get_mut(&task_id).unwrap();
                rt.state = TaskState::Paused;
                rt.pause_started = self.now;
                rt.pause_tool = Some(tool.clone());
                rt.pause_expected_end = self.now + expected;
                rt.pause_evicted = false;
                rt.task.current_node = next_node;
            }
            self.schedule(self.now + wait_us, Pending::ToolDone { task: task_id, tool, wait_us });
        }
        self.try_dispatch(worker)
    }

    fn on_tool_done(&mut self, task_id: TaskId, tool: ToolKind, wait_us: Micros) -> Result<(), SimError> {
        let worker = self.tasks[&task_id].worker;
        self.log_event(EventKind::ToolDone { task_id, worker_id: worker, tool: tool.clone(), wait_us });
        self.history.record(&tool, us_to_ms(wait_us));
        let (next_step, increment) = {
            let rt = self.tasks.get_mut(&task_id).unwrap();
            rt.step += 1;
            (rt.step, rt.task.plan[rt.step].prompt_increment)
        };
        let _ = next_step;
        self.obs_model.observe(&tool, increment);
        let dest = self.route_for(task_id);
        let prev = self.tasks[&task_id].worker;
        if dest != prev {
            self.in_progress[prev as usize].remove(&task_id);
        }
        self.enqueue(dest, task_id, true);
        self.try_dispatch(dest)
    }

    fn on_prefetch_fire(&mut self, worker: WorkerId, task_id: TaskId, attempts: u8) {
        let Some(rt) = self.tasks.get(&task_id) else { return };
        if rt.state != TaskState::Paused || rt.worker != worker {
            return;
        }
        if self.cluster.worker(worker).cached(task_id) {
            return;
        }
        let tokens = rt.task.context_tokens;
        let bpt = self.cfg.cost.bytes_per_token;
        let need = tokens * bpt;
        let free = self
            .capacity_bytes
            .saturating_sub(self.cluster.worker(worker).used_bytes());
        let channel_free = self.prefill_busy_until[worker as usize] <= self.now;
        let retry = |sim: &mut Self| {
            // Retry while the pause lasts; give up after a few collisions.
            if attempts < 12 {
                let at = sim.prefill_busy_until[worker as usize].max(sim.now + sim.epoch_us);
                sim.schedule(at, Pending::PrefetchFire { worker, task: task_id, attempts: attempts + 1 });
            }
        };
        // Speculative work must never displace demand work: warm up only an
        // idle channel with an empty queue, where the alternative is idling.
        if !channel_free || !self.cluster.worker(worker).queue.is_empty() {
            retry(self);
            return;
        }
        if need > free {
            // A speculative warm-up may displace cold entries, but never
            // contexts likely to be reused: that would trade a known miss
            // for a probable one.
            let shortfall = need - free;
            let Ok(victims) = select_victims(
                self.cluster.worker(worker),
                shortfall,
                self.cfg.policy,
                self.now,
                &self.cfg.weights,
                Some(task_id),
            ) else {
                return;
            };
            if victims
                .iter()
                .any(|v| self.cluster.worker(worker).resident[v].reuse_prob >= 0.5)
            {
                retry(self);
                return;
            }
            for v in victims {
                self.evict(worker, v);
            }
        }
        let dur = self.cfg.cost.prefill_us(tokens);
        self.log_event(EventKind::PrefetchStart { task_id, worker_id: worker, tokens });
        self.prefill_busy_until[worker as usize] = self.now + dur;
        self.busy_us[worker as usize] += dur;
        self.regen_total += tokens;
        self.schedule(self.now + dur, Pending::PrefetchDone { worker, task: task_id, tokens });
    }

    fn on_prefetch_done(&mut self, worker: WorkerId, task_id: TaskId, tokens: u64) {
        let Some(rt) = self.tasks.get(&task_id) else { return };
        if rt.state != TaskState::Paused || rt.worker != worker {
            return;
        }
        let bpt = self.cfg.cost.bytes_per_token;
        let free = self
            .capacity_bytes
            .saturating_sub(self.cluster.worker(worker).used_bytes());
        if tokens * bpt > free {
            return; // space vanished while prefilling; drop the result
        }
        let mut e = CacheEntry::new(task_id, worker, tokens, bpt, self.now);
        e.reuse_prob = 1.0; // resuming imminently
        self.cluster.worker_mut(worker).resident.insert(task_id, e);
        self.log_event(EventKind::PrefetchDone { task_id, worker_id: worker, tokens });
    }

    fn on_migrate_done(
        &mut self,
        session: TaskId,
        thief: WorkerId,
        victim: WorkerId,
        request: Option<QueuedRequest>,
    ) -> Result<(), SimError> {
        self.migrations += 1;
        if let Some(mut entry) = self.in_flight.remove(&session) {
            let used = self.cluster.worker(thief).used_bytes();
            let free = self.capacity_bytes.saturating_sub(used);
            let fits = if entry.bytes <= free {
                true
            } else {
                match select_victims(
                    self.cluster.worker(thief),
                    entry.bytes - free,
                    self.cfg.policy,
                    self.now,
                    &self.cfg.weights,
                    Some(session),
                ) {
                    Ok(victims) => {
                        for v in victims {
                            self.evict(thief, v);
                        }
                        true
                    }
                    Err(_) => false, // cannot fit: arrive cold instead
                }
            };
            if fits {
                entry.worker_id = thief;
                entry.last_access_us = self.now;
                let bytes = entry.bytes;
                self.cluster.worker_mut(thief).resident.insert(session, entry);
                self.log_event(EventKind::MigrateDone { session_id: session, thief, victim, bytes });
            }
        } else {
            // Nothing was resident at steal time: plain queue handoff.
            self.log_event(EventKind::MigrateDone { session_id: session, thief, victim, bytes: 0 });
        }
        self.cluster.session_affinity.insert(session, thief);
        if let Some(req) = request {
            let rt = self.tasks.get_mut(&session).unwrap();
            rt.worker = thief;
            rt.state = TaskState::Queued;
            let mut req = req;
            req.enqueue_us = self.now;
            let step_ok = req.step_index == rt.step;
            if step_ok {
                self.cluster.worker_mut(thief).queue.push_back(req);
                self.cluster.idle_since_us[thief as usize] = None;
            }
        }
        self.try_dispatch(thief)
    }

    fn on_epoch_tick(&mut self) -> Result<(), SimError> {
        self.cluster.epoch_counter += 1;
        let epoch = self.cluster.epoch_counter;
        self.log_event(EventKind::EpochTick { epoch });
        self.recompute_loads();
        self.refill_budgets();
        if self.cfg.fairness == FairnessPolicy::Afs && self.cluster.workers.len() > 1 {
            self.run_preemption();
        }
        if self.cfg.steal.enabled {
            self.run_steal();
        }
        // Budget refills may unblock queued work.
        for w in 0..self.cluster.workers.len() as WorkerId {
            self.try_dispatch(w)?;
        }
        let next = self.now + self.epoch_us;
        if next <= self.horizon {
            self.schedule(next, Pending::EpochTick);
        }
        Ok(())
    }

    /// Load = pending work on the serial prefill channel relative to one
    /// epoch, clamped to [0,1]. Decode runs in parallel and is excluded.
    fn recompute_loads(&mut self) {
        for wi in 0..self.cluster.workers.len() {
            let worker = &self.cluster.workers[wi];
            let mut pending = self.prefill_busy_until[wi].saturating_sub(self.now);
            for req in &worker.queue {
                let cached = worker
                    .resident
                    .get(&req.task_id)
                    .map(|e| e.tokens.min(req.prompt_tokens))
                    .unwrap_or(0);
                pending += self.cfg.cost.prefill_us(req.prompt_tokens - cached);
            }
            self.cluster.workers[wi].load = (pending as f64 / self.epoch_us as f64).min(1.0);
        }
    }

    fn refill_budgets(&mut self) {
        let capacity_ms = self.cfg.epoch_ms * self.cluster.workers.len() as f64;
        // Deficit carryover: admissions are whole steps, so a tenant can
        // overdraw its share by one step's cost. The debt persists into
        // following epochs, keeping long-term consumption proportional even
        // when a single step costs many epochs' worth of share.
        let debt = |budgets: &Option<BTreeMap<TenantId, f64>>, t: TenantId| -> f64 {
            budgets
                .as_ref()
                .and_then(|b| b.get(&t))
                .map(|&v| v.min(0.0))
                .unwrap_or(0.0)
        };
        self.budgets = match self.cfg.fairness {
            FairnessPolicy::Fcfs => None,
            FairnessPolicy::Uniform => {
                let active: BTreeSet<TenantId> = self
                    .tasks
                    .values()
                    .filter(|rt| rt.state != TaskState::Finished && rt.state != TaskState::Pending)
                    .map(|rt| rt.task.tenant_id)
                    .collect();
                if active.is_empty() {
                    Some(BTreeMap::new())
                } else {
                    let share = ms_to_us(capacity_ms) as f64 / active.len() as f64;
                    Some(
                        active
                            .into_iter()
                            .map(|t| (t, share + debt(&self.budgets, t)))
                            .collect(),
                    )
                }
            }
            FairnessPolicy::Afs => {
                let mut per_tenant: BTreeMap<TenantId, Vec<&crate::model::Task>> = BTreeMap::new();
                for rt in self.tasks.values() {
                    if rt.state != TaskState::Finished && rt.state != TaskState::Pending {
                        per_tenant.entry(rt.task.tenant_id).or_default().push(&rt.task);
                    }
                }
                if per_tenant.is_empty() {
                    Some(BTreeMap::new())
                } else {
                    let urgency: BTreeMap<TenantId, f64> = per_tenant
                        .iter()
                        .map(|(&t, tasks)| {
                            (
                                t,
                                afs_score(
                                    tasks.iter().copied(),
                                    self.now,
                                    &self.cfg.cost,
                                    self.cfg.epoch_ms,
                                ),
                            )
                        })
                        .collect();
                    let alloc = allocate_epoch(&urgency, capacity_ms);
                    Some(
                        alloc
                            .into_iter()
                            .map(|(t, ms)| (t, ms_to_us(ms) as f64 + debt(&self.budgets, t)))
                            .collect(),
                    )
                }
            }
        };
    }

    fn run_preemption(&mut self) {
        let mut queues: BTreeMap<WorkerId, Vec<QueueStanding>> = BTreeMap::new();
        for worker in &self.cluster.workers {
            let standings = worker
                .queue
                .iter()
                .map(|req| {
                    let rt = &self.tasks[&req.task_id];
                    let work = work_remain(&rt.task, &self.cfg.cost);
                    let remain_ms = if rt.task.deadline_us > self.now {
                        us_to_ms(rt.task.deadline_us - self.now).max(self.cfg.epoch_ms)
                    } else {
                        self.cfg.epoch_ms
                    };
                    QueueStanding {
                        task_id: req.task_id,
                        urgency: work / remain_ms,
                        enqueue_us: req.enqueue_us,
                    }
                })
                .collect();
            queues.insert(worker.worker_id, standings);
        }
        let loads: BTreeMap<WorkerId, f64> =
            self.cluster.workers.iter().map(|w| (w.worker_id, w.load)).collect();
        let actions = maybe_preempt(&queues, &loads, self.now, self.cfg.block_threshold_ms);
        for a in actions {
            // The blocker's queued request and cache both move.
            let Some(pos) = self
                .cluster
                .worker(a.from_worker)
                .queue
                .iter()
                .position(|r| r.task_id == a.task_id)
            else {
                continue;
            };
            let req = self.cluster.worker_mut(a.from_worker).queue.remove(pos).unwrap();
            if self.cluster.worker(a.from_worker).queue.is_empty() {
                self.cluster.idle_since_us[a.from_worker as usize] = Some(self.now);
            }
            self.log_event(EventKind::Preempt {
                task_id: a.task_id,
                worker_id: a.from_worker,
                dest: a.dest_worker,
            });
            self.preemptions += 1;
            self.in_progress[a.from_worker as usize].remove(&a.task_id);
            let entry = self.cluster.worker_mut(a.from_worker).resident.remove(&a.task_id);
            if let Some(e) = entry {
                self.in_flight.insert(a.task_id, e);
            }
            let lat = ms_to_us(self.cfg.steal.migrate_latency.sample_ms(&mut self.rng));
            self.schedule(
                self.now + lat,
                Pending::MigrateDone {
                    session: a.task_id,
                    thief: a.dest_worker,
                    victim: a.from_worker,
                    request: Some(req),
                },
            );
        }
    }

    fn run_steal(&mut self) {
        let Some(action) = maybe_steal(
            &self.cluster,
            &self.cfg.steal,
            self.now,
            &self.cooldown,
            &mut self.rng,
        ) else {
            return;
        };
        let StealAction { thief, victim, session } = action;
        self.log_event(EventKind::Steal { session_id: session, thief, victim });
        self.steals += 1;
        self.cooldown.insert(session);
        let req = self
            .cluster
            .worker_mut(victim)
            .queue
            .pop_front()
            .expect("steal picked a non-empty victim queue");
        debug_assert_eq!(req.task_id, session);
        if self.cluster.worker(victim).queue.is_empty() {
            self.cluster.idle_since_us[victim as usize] = Some(self.now);
        }
        self.in_progress[victim as usize].remove(&session);
        if let Some(e) = self.cluster.worker_mut(victim).resident.remove(&session) {
            self.in_flight.insert(session, e);
        }
        let lat = ms_to_us(self.cfg.steal.migrate_latency.sample_ms(&mut self.rng));
        self.schedule(
            self.now + lat,
            Pending::MigrateDone { session, thief, victim, request: Some(req) },
        );
    }

    fn finish(mut self) -> Result<SimOutput, SimError> {
        let unfinished = self
            .tasks
            .values()
            .filter(|rt| rt.state != TaskState::Finished)
            .count() as u64;
        let mut m = MetricsReport {
            tasks_unfinished: unfinished,
            tct_ms: std::mem::take(&mut self.tct_ms),
            slo: crate::fairness::slo_attainment(&self.finished),
            eviction_rate: if self.pauses_total > 0 {
                self.pauses_evicted as f64 / self.pauses_total as f64
            } else {
                0.0
            },
            evictions_total: self.evictions,
            regen_tokens_total: self.regen_total,
            prefill_tokens_total: self.prefill_total,
            steals_total: self.steals,
            migrations_total: self.migrations,
            preemptions_total: self.preemptions,
            ttl_coverage: if self.ttl_granted > 0 {
                Some(self.ttl_covered as f64 / self.ttl_granted as f64)
            } else {
                None
            },
            worker_busy_us: self.busy_us.clone(),
            ..MetricsReport::default()
        };
        m.useful_kv_fraction = useful_kv_fraction(
            &self.log,
            self.capacity_bytes * self.cluster.workers.len() as u64,
            self.cfg.cost.bytes_per_token,
            self.horizon,
        );
        m.finalize_tct(self.horizon);
        Ok(SimOutput { events: self.log, metrics: m })
    }
}
