//! Execution-graph construction and reuse estimation.
//!
//! Graphs come from explicit hints (workload generator metadata standing in
//! for framework callbacks) or from first-order tool-type pattern inference
//! over completed request streams.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::{AegEdge, AgentExecutionGraph, NodeId, Task, ToolKind};

/// Confidence threshold for retaining inferred edges.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.7;
/// Pattern inference stays inactive until this many tasks complete.
pub const COLD_START_TASKS: u64 = 30;
/// EMA smoothing for observation-length estimates.
pub const OBS_EMA_ALPHA: f64 = 0.2;

/// One step of an explicit workflow hint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HintStep {
    pub tool: ToolKind,
    /// Probability of continuing to the next step; residual mass terminates.
    pub continue_prob: f64,
}

/// Structured workflow hint: a chain of steps plus optional retry back-edges
/// (by step index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AegHint {
    pub steps: Vec<HintStep>,
    #[serde(default)]
    pub retries: Vec<RetryHint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryHint {
    pub from_step: usize,
    pub to_step: usize,
    pub prob: f64,
}

/// Build a chain AEG whose edge probabilities equal the hint's.
pub fn build_from_hints(hint: &AegHint) -> Result<AgentExecutionGraph, SimError> {
    if hint.steps.is_empty() {
        return Err(SimError::validation("hint.steps", "hint must be non-empty"));
    }
    let n = hint.steps.len();
    let nodes: Vec<NodeId> = (0..n as NodeId).collect();
    let mut edges = Vec::new();
    for (i, s) in hint.steps.iter().enumerate() {
        if !(0.0..=1.0).contains(&s.continue_prob) {
            return Err(SimError::validation(
                "hint.steps.continue_prob",
                format!("step {} probability {} outside [0,1]", i, s.continue_prob),
            ));
        }
        if i + 1 < n && s.continue_prob > 0.0 {
            edges.push(AegEdge {
                from: i as NodeId,
                to: (i + 1) as NodeId,
                prob: s.continue_prob,
                retry: false,
            });
        }
    }
    for r in &hint.retries {
        if r.from_step >= n || r.to_step >= r.from_step {
            return Err(SimError::validation(
                "hint.retries",
                format!("retry {}->{} must target an earlier step", r.from_step, r.to_step),
            ));
        }
        edges.push(AegEdge {
            from: r.from_step as NodeId,
            to: r.to_step as NodeId,
            prob: r.prob,
            retry: true,
        });
    }
    let tool_of = hint
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (i as NodeId, s.tool.clone()))
        .collect();
    let mut terminal = std::collections::BTreeSet::new();
    terminal.insert((n - 1) as NodeId);
    let g = AgentExecutionGraph { nodes, edges, tool_of, terminal };
    g.validate()?;
    Ok(g)
}

/// A completed task's tool-type sequence, used for pattern extraction.
pub type ToolTrace = Vec<ToolKind>;

/// First-order (bigram) transition counts over tool types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternModel {
    /// counts[(a, Some(b))] = times tool b followed tool a;
    /// counts[(a, None)] = times a trace terminated after a.
    counts: BTreeMap<ToolKind, BTreeMap<Option<ToolKind>, u64>>,
    pub conf_threshold: f64,
    pub tasks_observed: u64,
}

impl Default for PatternModel {
    fn default() -> Self {
        PatternModel::new(DEFAULT_CONF_THRESHOLD)
    }
}

/// Inference outcome: either a graph or a request-level fallback signal.
#[derive(Debug, Clone, PartialEq)]
pub enum InferOutcome {
    Graph(AgentExecutionGraph),
    /// Cold start: fewer than [`COLD_START_TASKS`] tasks observed.
    NotReady,
}

impl PatternModel {
    pub fn new(conf_threshold: f64) -> Self {
        assert!(conf_threshold > 0.0 && conf_threshold <= 1.0);
        PatternModel {
            counts: BTreeMap::new(),
            conf_threshold,
            tasks_observed: 0,
        }
    }

    pub fn observe(&mut self, trace: &[ToolKind]) {
        for w in trace.windows(2) {
            *self
                .counts
                .entry(w[0].clone())
                .or_default()
                .entry(Some(w[1].clone()))
                .or_insert(0) += 1;
        }
        if let Some(last) = trace.last() {
            *self
                .counts
                .entry(last.clone())
                .or_default()
                .entry(None)
                .or_insert(0) += 1;
        }
        self.tasks_observed += 1;
    }

    /// Empirical transition probability a -> b (None = terminate).
    pub fn transition_prob(&self, a: &ToolKind, b: Option<&ToolKind>) -> f64 {
        let Some(row) = self.counts.get(a) else { return 0.0 };
        let total: u64 = row.values().sum();
        if total == 0 {
            return 0.0;
        }
        let c = *row.get(&b.cloned()).unwrap_or(&0);
        c as f64 / total as f64
    }

    /// Infer a tool-type graph retaining only transitions whose empirical
    /// probability meets the confidence threshold.
    pub fn infer(&self) -> InferOutcome {
        if self.tasks_observed < COLD_START_TASKS {
            return InferOutcome::NotReady;
        }
        // One node per observed tool type, in sorted order.
        let tools: Vec<ToolKind> = self.counts.keys().cloned().collect();
        let index: BTreeMap<&ToolKind, NodeId> = tools
            .iter()
            .enumerate()
            .map(|(i, t)| (t, i as NodeId))
            .collect();
        let mut edges = Vec::new();
        let mut terminal = std::collections::BTreeSet::new();
        for (a, row) in &self.counts {
            let total: u64 = row.values().sum();
            if total == 0 {
                continue;
            }
            let from = index[a];
            let mut kept_any = false;
            for (b, &c) in row {
                let p = c as f64 / total as f64;
                match b {
                    Some(b) if p >= self.conf_threshold => {
                        // Self-loops are retry-style; mark them so the forward
                        // subgraph stays acyclic.
                        let to = index[b];
                        edges.push(AegEdge { from, to, prob: p, retry: to <= from });
                        kept_any = true;
                    }
                    _ => {}
                }
            }
            if !kept_any {
                terminal.insert(from);
            }
        }
        let tool_of = tools
            .iter()
            .enumerate()
            .map(|(i, t)| (i as NodeId, t.clone()))
            .collect();
        InferOutcome::Graph(AgentExecutionGraph {
            nodes: (0..tools.len() as NodeId).collect(),
            edges,
            tool_of,
            terminal,
        })
    }

    /// Predict the next tool after `current`: the retained successor with the
    /// highest empirical probability, or None (terminate) when no retained
    /// edge exists or termination mass dominates.
    pub fn predict_next(&self, graph: &AgentExecutionGraph, current: &ToolKind) -> Option<ToolKind> {
        let node = graph
            .tool_of
            .iter()
            .find(|(_, t)| *t == current)
            .map(|(n, _)| *n)?;
        let best = graph
            .outgoing(node)
            .max_by(|a, b| a.prob.partial_cmp(&b.prob).unwrap().then(b.to.cmp(&a.to)))?;
        let term_mass = 1.0 - graph.continue_prob(node);
        if best.prob >= term_mass {
            graph.tool_of.get(&best.to).cloned()
        } else {
            None
        }
    }
}

/// Fraction of correctly predicted next-step transitions over held-out traces.
pub fn prediction_accuracy(
    model: &PatternModel,
    graph: &AgentExecutionGraph,
    held_out: &[ToolTrace],
) -> f64 {
    let mut total = 0u64;
    let mut correct = 0u64;
    for trace in held_out {
        for i in 0..trace.len() {
            let actual = trace.get(i + 1);
            let predicted = model.predict_next(graph, &trace[i]);
            total += 1;
            if predicted.as_ref() == actual {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

/// Prefix-overlap fraction between the current context and the next step's
/// expected requirement: context / (context + expected_obs).
pub fn overlap(context_tokens: u64, expected_obs_tokens: u64) -> f64 {
    if expected_obs_tokens == 0 {
        return 1.0;
    }
    if context_tokens == 0 {
        return 0.0;
    }
    context_tokens as f64 / (context_tokens + expected_obs_tokens) as f64
}

/// Per-tool EMA of observation token lengths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObsLenModel {
    est: BTreeMap<ToolKind, f64>,
}

impl ObsLenModel {
    pub fn observe(&mut self, tool: &ToolKind, tokens: u64) {
        match self.est.get_mut(tool) {
            Some(e) => *e = (1.0 - OBS_EMA_ALPHA) * *e + OBS_EMA_ALPHA * tokens as f64,
            None => {
                self.est.insert(tool.clone(), tokens as f64);
            }
        }
    }

    pub fn expected(&self, tool: &ToolKind) -> Option<u64> {
        self.est.get(tool).map(|e| e.round() as u64)
    }
}

/// Predicted probability that a session's cache is reused: sum over successors
/// of transition probability times prefix overlap, clamped to [0,1].
pub fn reuse_probability(task: &Task, graph: &AgentExecutionGraph, obs_model: &ObsLenModel) -> f64 {
    let node = task.current_node;
    if !graph.contains_node(node) {
        return 0.0;
    }
    let expected_obs = graph
        .tool_of
        .get(&node)
        .and_then(|t| obs_model.expected(t))
        .unwrap_or(0);
    let mut p = 0.0;
    for e in graph.outgoing(node) {
        p += e.prob * overlap(task.context_tokens, expected_obs);
    }
    p.clamp(0.0, 1.0)
}

/// Reuse probability from explicit per-successor overlaps (tree-of-thought
/// branches supply shared-prefix fractions directly).
pub fn reuse_probability_with_overlaps(
    graph: &AgentExecutionGraph,
    node: NodeId,
    overlaps: &BTreeMap<NodeId, f64>,
) -> f64 {
    let mut p = 0.0;
    for e in graph.outgoing(node) {
        p += e.prob * overlaps.get(&e.to).copied().unwrap_or(0.0);
    }
    p.clamp(0.0, 1.0)
}

/// Re-anchor a task whose predicted successor did not match the arriving
/// request: pick the graph node with the same tool type closest after the
/// current node, falling back to the current node. Errors do not cascade.
pub fn reanchor(graph: &AgentExecutionGraph, current: NodeId, actual_tool: &ToolKind) -> NodeId {
    let mut candidates: Vec<NodeId> = graph
        .tool_of
        .iter()
        .filter(|(_, t)| *t == actual_tool)
        .map(|(n, _)| *n)
        .collect();
    candidates.sort_unstable();
    candidates
        .iter()
        .copied()
        .find(|&n| n > current)
        .or_else(|| candidates.first().copied())
        .unwrap_or(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentExecutionGraph;

    fn tool(n: &str) -> ToolKind {
        ToolKind::Other(n.to_string())
    }

    #[test]
    fn react_hint_builds_chain() {
        let hint = AegHint {
            steps: (0..5)
                .map(|_| HintStep { tool: ToolKind::CodeExecution, continue_prob: 0.95 })
                .collect(),
            retries: vec![],
        };
        let g = build_from_hints(&hint).unwrap();
        assert_eq!(g.nodes.len(), 5);
        assert_eq!(g.edges.len(), 4);
        for e in &g.edges {
            assert_eq!(e.prob, 0.95);
        }
        assert!(g.terminal.contains(&4));
    }

    #[test]
    fn single_step_hint_has_no_edges() {
        let hint = AegHint {
            steps: vec![HintStep { tool: ToolKind::FileOps, continue_prob: 0.0 }],
            retries: vec![],
        };
        let g = build_from_hints(&hint).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn retry_shape_matches_fig2_style() {
        // 5 nodes, forward 0.95/0.85/0.70/0.60, retries v2->v1 0.30, v3->v2 0.40.
        let probs = [0.95, 0.85, 0.70, 0.60, 0.0];
        let hint = AegHint {
            steps: probs
                .iter()
                .map(|&p| HintStep { tool: ToolKind::CodeExecution, continue_prob: p })
                .collect(),
            retries: vec![
                RetryHint { from_step: 2, to_step: 1, prob: 0.30 },
                RetryHint { from_step: 3, to_step: 2, prob: 0.40 },
            ],
        };
        let g = build_from_hints(&hint).unwrap();
        assert_eq!(g.edges.iter().filter(|e| !e.retry).count(), 4);
        assert_eq!(g.edges.iter().filter(|e| e.retry).count(), 2);
        let retry: Vec<_> = g.edges.iter().filter(|e| e.retry).collect();
        assert_eq!((retry[0].from, retry[0].to, retry[0].prob), (2, 1, 0.30));
        assert_eq!((retry[1].from, retry[1].to, retry[1].prob), (3, 2, 0.40));
        g.validate().unwrap();
    }

    #[test]
    fn malformed_hint_rejected() {
        // Forward 0.9 plus retry 0.2 from the same node exceeds mass 1.
        let hint = AegHint {
            steps: vec![
                HintStep { tool: ToolKind::FileOps, continue_prob: 0.9 },
                HintStep { tool: ToolKind::FileOps, continue_prob: 0.9 },
                HintStep { tool: ToolKind::FileOps, continue_prob: 0.0 },
            ],
            retries: vec![RetryHint { from_step: 1, to_step: 0, prob: 0.2 }],
        };
        assert!(build_from_hints(&hint).is_err());
    }

    #[test]
    fn cold_start_below_thirty() {
        let mut m = PatternModel::default();
        for _ in 0..29 {
            m.observe(&[tool("a"), tool("b")]);
        }
        assert_eq!(m.infer(), InferOutcome::NotReady);
        m.observe(&[tool("a"), tool("b")]);
        assert!(matches!(m.infer(), InferOutcome::Graph(_)));
    }

    #[test]
    fn low_confidence_self_loop_dropped() {
        // 30 traces a -> b -> b -> terminal: a->b at 1.0 retained,
        // b->b at 0.5 dropped, so b becomes terminal.
        let mut m = PatternModel::default();
        for _ in 0..30 {
            m.observe(&[tool("a"), tool("b"), tool("b")]);
        }
        let InferOutcome::Graph(g) = m.infer() else { panic!("ready") };
        assert_eq!(g.edges.len(), 1);
        let e = &g.edges[0];
        assert_eq!(g.tool_of[&e.from], tool("a"));
        assert_eq!(g.tool_of[&e.to], tool("b"));
        assert_eq!(e.prob, 1.0);
        assert!(g.terminal.contains(&e.to));
    }

    #[test]
    fn minority_branch_dropped() {
        let mut m = PatternModel::default();
        for i in 0..30 {
            if i % 10 == 0 {
                m.observe(&[tool("a"), tool("c")]);
            } else {
                m.observe(&[tool("a"), tool("b")]);
            }
        }
        let InferOutcome::Graph(g) = m.infer() else { panic!("ready") };
        let from_a: Vec<_> = g
            .edges
            .iter()
            .filter(|e| g.tool_of[&e.from] == tool("a"))
            .collect();
        assert_eq!(from_a.len(), 1);
        assert_eq!(g.tool_of[&from_a[0].to], tool("b"));
        assert!((from_a[0].prob - 0.9).abs() < 1e-12);
    }

    #[test]
    fn overlap_edges() {
        assert_eq!(overlap(12_000, 4_000), 0.75);
        assert_eq!(overlap(123, 0), 1.0);
        assert_eq!(overlap(0, 500), 0.0);
    }

    #[test]
    fn obs_ema_converges_to_constant() {
        let mut m = ObsLenModel::default();
        for _ in 0..50 {
            m.observe(&ToolKind::FileOps, 400);
        }
        assert_eq!(m.expected(&ToolKind::FileOps), Some(400));
    }

    fn task_at(node: NodeId, context: u64, g: &AgentExecutionGraph) -> Task {
        Task {
            task_id: 1,
            tenant_id: 0,
            aeg: g.clone(),
            current_node: node,
            context_tokens: context,
            steps_done: 0,
            submit_us: 0,
            deadline_us: 0,
            plan: vec![],
            records: vec![],
        }
    }

    #[test]
    fn reuse_zero_at_terminal() {
        let g = AgentExecutionGraph::linear_chain(2, 1.0, ToolKind::FileOps);
        let t = task_at(1, 1000, &g);
        assert_eq!(reuse_probability(&t, &g, &ObsLenModel::default()), 0.0);
    }

    #[test]
    fn reuse_single_successor() {
        // One successor p = 0.9, overlap = 0.75 (context 12000, obs 4000).
        let g = AgentExecutionGraph::linear_chain(2, 0.9, ToolKind::FileOps);
        let mut obs = ObsLenModel::default();
        obs.observe(&ToolKind::FileOps, 4_000);
        let t = task_at(0, 12_000, &g);
        assert!((reuse_probability(&t, &g, &obs) - 0.675).abs() < 1e-12);
    }

    #[test]
    fn reuse_two_successors_with_explicit_overlaps() {
        let mut g = AgentExecutionGraph::linear_chain(3, 0.0, ToolKind::FileOps);
        g.edges = vec![
            AegEdge { from: 0, to: 1, prob: 0.6, retry: false },
            AegEdge { from: 0, to: 2, prob: 0.4, retry: false },
        ];
        let overlaps = [(1, 0.8), (2, 0.5)].into_iter().collect();
        let p = reuse_probability_with_overlaps(&g, 0, &overlaps);
        assert!((p - 0.68).abs() < 1e-12);
    }

    #[test]
    fn reanchor_matches_tool_type() {
        let hint = AegHint {
            steps: vec![
                HintStep { tool: tool("a"), continue_prob: 1.0 },
                HintStep { tool: tool("b"), continue_prob: 1.0 },
                HintStep { tool: tool("a"), continue_prob: 0.0 },
            ],
            retries: vec![],
        };
        let g = build_from_hints(&hint).unwrap();
        assert_eq!(reanchor(&g, 0, &tool("a")), 2);
        assert_eq!(reanchor(&g, 2, &tool("b")), 1);
    }

    #[test]
    fn inference_recovers_known_chain() {
        // Generator: a ->(0.9) b ->(0.85) c -> terminal; both edges >= 0.7.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let mut m = PatternModel::default();
        for _ in 0..200 {
            let mut trace = vec![tool("a")];
            if rng.gen_bool(0.9) {
                trace.push(tool("b"));
                if rng.gen_bool(0.85) {
                    trace.push(tool("c"));
                }
            }
            m.observe(&trace);
        }
        let InferOutcome::Graph(g) = m.infer() else { panic!("ready") };
        let mut got: Vec<(ToolKind, ToolKind)> = g
            .edges
            .iter()
            .map(|e| (g.tool_of[&e.from].clone(), g.tool_of[&e.to].clone()))
            .collect();
        got.sort();
        assert_eq!(got, vec![(tool("a"), tool("b")), (tool("b"), tool("c"))]);
    }
}
