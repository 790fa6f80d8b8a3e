//! Simulation configuration: one document wiring workload, cluster shape,
//! and every policy knob, loadable from JSON or TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{EvictionPolicy, EvictionWeights, TtlConfig};
use crate::error::SimError;
use crate::fairness::{FairnessPolicy, DEFAULT_BLOCK_THRESHOLD_MS, DEFAULT_EPOCH_MS};
use crate::model::{CostModel, ToolLatencyTable, WorkerId};
use crate::scheduler::{StealConfig, DEFAULT_THETA};
use crate::workload::{WorkloadKind, WorkloadSpec};

/// Step-interleaving strategy: how many concurrent steps one worker admits
/// and how its queue is ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Round-robin across all ready tasks, unbounded concurrency.
    Bfs,
    /// Run each task to completion before admitting the next.
    Dfs,
    /// Bounded concurrency with the full policy stack.
    Hybrid,
}

impl Strategy {
    /// Max concurrently active steps per worker; None = unbounded.
    pub fn concurrency(&self) -> Option<usize> {
        match self {
            Strategy::Bfs => None,
            Strategy::Dfs => Some(1),
            Strategy::Hybrid => Some(4),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "bfs" => Ok(Strategy::Bfs),
            "dfs" => Ok(Strategy::Dfs),
            "hybrid" => Ok(Strategy::Hybrid),
            other => Err(SimError::validation("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub num_workers: usize,
    /// Per-worker KV capacity in tokens (bytes = tokens x cost.bytes_per_token).
    pub kv_capacity_tokens: u64,
    /// Force all initial routing to one worker (hot/cold synthetics).
    #[serde(default)]
    pub pin_worker: Option<WorkerId>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { num_workers: 4, kv_capacity_tokens: 131_072, pin_worker: None }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub workload: WorkloadSpec,
    pub cluster: ClusterConfig,
    pub policy: EvictionPolicy,
    pub weights: EvictionWeights,
    pub ttl: TtlConfig,
    /// Affinity load threshold.
    pub theta: f64,
    pub steal: StealConfig,
    pub fairness: FairnessPolicy,
    pub epoch_ms: f64,
    pub block_threshold_ms: f64,
    pub strategy: Strategy,
    pub cost: CostModel,
    pub tools: ToolLatencyTable,
    /// Simulation horizon in seconds; tasks unfinished at the horizon are
    /// reported separately.
    pub horizon_s: f64,
    #[serde(default = "default_true")]
    pub prefetch: bool,
    #[serde(default = "default_true")]
    pub ttl_enabled: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workload: WorkloadSpec::preset(WorkloadKind::SweBenchLike, 600.0),
            cluster: ClusterConfig::default(),
            policy: EvictionPolicy::WaLru,
            weights: EvictionWeights::default(),
            ttl: TtlConfig::default(),
            theta: DEFAULT_THETA,
            steal: StealConfig::default(),
            fairness: FairnessPolicy::Afs,
            epoch_ms: DEFAULT_EPOCH_MS,
            block_threshold_ms: DEFAULT_BLOCK_THRESHOLD_MS,
            strategy: Strategy::Hybrid,
            cost: CostModel::default(),
            tools: crate::model::default_tool_latencies(),
            horizon_s: 7_200.0,
            prefetch: true,
            ttl_enabled: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.workload.validate()?;
        if self.cluster.num_workers == 0 {
            return Err(SimError::validation("cluster.num_workers", "must be >= 1"));
        }
        if self.cluster.kv_capacity_tokens == 0 {
            return Err(SimError::validation("cluster.kv_capacity_tokens", "must be >= 1"));
        }
        if let Some(w) = self.cluster.pin_worker {
            if w as usize >= self.cluster.num_workers {
                return Err(SimError::validation("cluster.pin_worker", "not a valid worker id"));
            }
        }
        self.weights.normalized().map(|_| ())?;
        self.ttl.validate()?;
        if !(0.0 <= self.theta && self.theta <= 1.0) {
            return Err(SimError::validation("theta", "must be in [0, 1]; 0 disables affinity"));
        }
        self.steal.validate()?;
        if self.epoch_ms <= 0.0 {
            return Err(SimError::validation("epoch_ms", "must be > 0"));
        }
        if self.block_threshold_ms <= 0.0 {
            return Err(SimError::validation("block_threshold_ms", "must be > 0"));
        }
        self.cost.validate()?;
        for (kind, dist) in &self.tools {
            dist.validate().map_err(|e| {
                SimError::validation(format!("tools.{}", kind.name()), e.to_string())
            })?;
        }
        if self.horizon_s <= 0.0 {
            return Err(SimError::validation("horizon_s", "must be > 0"));
        }
        Ok(())
    }

    /// Disable one component, for single-component ablations.
    pub fn ablate(&mut self, component: &str) -> Result<(), SimError> {
        match component {
            "session-affinity" => self.theta = 0.0, // `load < 0` never holds: always least-loaded
            "eviction" => self.policy = EvictionPolicy::Lru,
            "ttl" => self.ttl_enabled = false,
            "prefetch" => self.prefetch = false,
            "stealing" => self.steal.enabled = false,
            "afs" => self.fairness = FairnessPolicy::Fcfs,
            other => {
                return Err(SimError::validation(
                    "ablate",
                    format!(
                        "unknown component `{other}` (expected session-affinity, eviction, ttl, prefetch, stealing, afs)"
                    ),
                ))
            }
        }
        Ok(())
    }

    pub fn kv_capacity_bytes(&self) -> u64 {
        self.cluster.kv_capacity_tokens * self.cost.bytes_per_token
    }
}

pub fn parse_config_json(input: &str) -> Result<SimConfig, SimError> {
    let cfg: SimConfig =
        serde_json::from_str(input).map_err(|e| SimError::Parse(format!("config json: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_toml(input: &str) -> Result<SimConfig, SimError> {
    let cfg: SimConfig =
        toml::from_str(input).map_err(|e| SimError::Parse(format!("config toml: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config by file extension (`.json` or `.toml`).
pub fn load_config(path: &Path) -> Result<SimConfig, SimError> {
    let input = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => parse_config_json(&input),
        Some("toml") => parse_config_toml(&input),
        other => Err(SimError::validation(
            "config",
            format!("unsupported config extension {other:?} (expected .json or .toml)"),
        )),
    }
}
