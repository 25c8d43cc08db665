//! Circuits: sparse edge subgraphs selected from attribution scores.
//!
//! Construction keeps the top-n edges by |score| (deterministic tie-break by
//! edge order), then removes everything not on a directed Input-to-Output
//! path. Simplification drops kept edges below a fraction tau of the maximum
//! kept |score| and re-prunes. Faithfulness runs the clean prompt with every
//! non-circuit edge patched to its corrupted-run contribution and measures
//! how much of the clean behavior survives.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attribution::{final_probs, kl_scalar, run_pair, EdgeScores, PromptPair};
use crate::error::CoreError;
use crate::model::{forward, EdgeId, InterventionSpec, ModelConfig, ModelParams, NodeId};
use crate::Result;

/// Default top-n edge budget.
pub const DEFAULT_TOP_N: usize = 5000;
/// Default simplification threshold.
pub const DEFAULT_TAU: f64 = 0.1;

/// Provenance carried by every circuit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CircuitMeta {
    pub top_n: usize,
    pub tau: f64,
    pub checkpoint: String,
    pub pairs_hash: String,
}

/// A scored sparse edge subgraph. Every node lies on a directed
/// Input-to-Output path within the kept edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub config: ModelConfig,
    pub nodes: BTreeSet<NodeId>,
    pub edges: BTreeMap<EdgeId, f64>,
    pub meta: CircuitMeta,
}

impl Circuit {
    /// Attention heads present in the circuit.
    pub fn head_set(&self) -> BTreeSet<(usize, usize)> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                NodeId::AttnHead { layer, head } => Some((*layer, *head)),
                _ => None,
            })
            .collect()
    }

    pub fn contains_head(&self, layer: usize, head: usize) -> bool {
        self.nodes.contains(&NodeId::AttnHead { layer, head })
    }

    /// Largest |score| among kept edges (0 when empty).
    pub fn max_abs_score(&self) -> f64 {
        self.edges.values().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Top-n edges by |score|, ties broken by edge order (destination, slot,
/// source). The result is the sorted-selection prefix, before path pruning.
pub fn select_top_edges(scores: &EdgeScores, top_n: usize) -> Vec<EdgeId> {
    let mut order: Vec<(&EdgeId, &f64)> = scores.scores.iter().collect();
    order.sort_by(|(ea, sa), (eb, sb)| {
        sb.abs()
            .partial_cmp(&sa.abs())
            .expect("scores are finite")
            .then(ea.cmp(eb))
    });
    order.into_iter().take(top_n).map(|(e, _)| *e).collect()
}

/// Keep only edges on some directed Input-to-Output path.
fn path_prune(edges: &BTreeMap<EdgeId, f64>) -> (BTreeSet<NodeId>, BTreeMap<EdgeId, f64>) {
    // Forward reachability from Input. Edges are sorted by destination, and
    // sources always precede destinations, so one sweep in edge order
    // reaches the fixpoint.
    let mut fwd: BTreeSet<NodeId> = BTreeSet::new();
    fwd.insert(NodeId::Input);
    for e in edges.keys() {
        if fwd.contains(&e.src) {
            fwd.insert(e.dst);
        }
    }
    // Backward reachability to Output (one sweep in reverse edge order).
    let mut bwd: BTreeSet<NodeId> = BTreeSet::new();
    bwd.insert(NodeId::Output);
    for e in edges.keys().rev() {
        if bwd.contains(&e.dst) {
            bwd.insert(e.src);
        }
    }
    let mut kept: BTreeMap<EdgeId, f64> = BTreeMap::new();
    let mut nodes: BTreeSet<NodeId> = BTreeSet::new();
    for (e, &s) in edges.iter() {
        if fwd.contains(&e.src) && bwd.contains(&e.dst) {
            kept.insert(*e, s);
            nodes.insert(e.src);
            nodes.insert(e.dst);
        }
    }
    (nodes, kept)
}

/// Build a circuit by top-n selection and path pruning.
pub fn build_circuit(scores: &EdgeScores, top_n: usize) -> Result<Circuit> {
    if top_n == 0 {
        return Err(CoreError::Invalid { detail: "top_n must be >= 1".into() });
    }
    let selected = select_top_edges(scores, top_n);
    let edge_map: BTreeMap<EdgeId, f64> = selected
        .into_iter()
        .map(|e| (e, scores.scores[&e]))
        .collect();
    let (nodes, edges) = path_prune(&edge_map);
    Ok(Circuit {
        config: scores.model_config.clone(),
        nodes,
        edges,
        meta: CircuitMeta {
            top_n,
            tau: 0.0,
            checkpoint: scores.checkpoint.clone(),
            pairs_hash: scores.pairs_hash.clone(),
        },
    })
}

/// Drop kept edges with |score| < tau * max kept |score|, then re-prune.
/// tau = 0 is the identity.
pub fn simplify(c: &Circuit, tau: f64) -> Result<Circuit> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CoreError::Invalid { detail: format!("tau {tau} must be in [0, 1]") });
    }
    let max = c.max_abs_score();
    let threshold = tau * max;
    let filtered: BTreeMap<EdgeId, f64> = c
        .edges
        .iter()
        .filter(|(_, s)| s.abs() >= threshold)
        .map(|(e, s)| (*e, *s))
        .collect();
    let (nodes, edges) = path_prune(&filtered);
    Ok(Circuit {
        config: c.config.clone(),
        nodes,
        edges,
        meta: CircuitMeta { tau, ..c.meta.clone() },
    })
}

/// One pair's contribution to a faithfulness evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFaithfulness {
    pub circuit_loss: f64,
    pub corrupted_loss: f64,
}

/// Result of ablating all non-circuit edges.
#[derive(Clone, Debug, PartialEq)]
pub struct FaithfulnessReport {
    /// Loss of the unpatched clean run; zero by the loss definition.
    pub clean_loss: f64,
    /// Mean loss with every non-circuit edge patched to its corrupted value.
    pub circuit_loss: f64,
    /// Mean loss of the fully corrupted input.
    pub corrupted_loss: f64,
    /// 1 - circuit_loss / corrupted_loss, clamped to at most 1.
    pub faithfulness_ratio: f64,
    /// Number of edges patched in each run.
    pub ablated_edge_count: usize,
    pub per_pair: Vec<PairFaithfulness>,
}

/// Evaluate circuit faithfulness on a pair set by patching every non-circuit
/// edge to its corrupted-run contribution.
pub fn faithfulness(
    params: &ModelParams,
    c: &Circuit,
    pairs: &[PromptPair],
) -> Result<FaithfulnessReport> {
    if c.config != params.config {
        return Err(CoreError::ConfigMismatch {
            detail: "circuit was built for a different model configuration".into(),
        });
    }
    if pairs.is_empty() {
        return Err(CoreError::EmptyPairList);
    }
    let non_circuit: Vec<EdgeId> = params
        .config
        .edges()
        .into_iter()
        .filter(|e| !c.edges.contains_key(e))
        .collect();

    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (clean, corrupted) = run_pair(params, pair)?;
        let p_clean = final_probs(&clean);
        let corrupted_loss = kl_scalar(p_clean.data(), corrupted.final_log_probs().data());
        let mut spec = InterventionSpec::empty();
        for e in &non_circuit {
            let replacement = corrupted
                .output(e.src)
                .expect("source output present")
                .clone();
            spec.patch_edges.insert(*e, replacement);
        }
        let patched = forward(params, &pair.clean, &spec)?;
        let circuit_loss = kl_scalar(p_clean.data(), patched.final_log_probs().data());
        per_pair.push(PairFaithfulness { circuit_loss, corrupted_loss });
    }
    let n = pairs.len() as f64;
    let circuit_loss = per_pair.iter().map(|p| p.circuit_loss).sum::<f64>() / n;
    let corrupted_loss = per_pair.iter().map(|p| p.corrupted_loss).sum::<f64>() / n;
    let faithfulness_ratio = if corrupted_loss > 0.0 {
        (1.0 - circuit_loss / corrupted_loss).min(1.0)
    } else if circuit_loss == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(FaithfulnessReport {
        clean_loss: 0.0,
        circuit_loss,
        corrupted_loss,
        faithfulness_ratio,
        ablated_edge_count: non_circuit.len(),
        per_pair,
    })
}

/// Attention heads present in a circuit (module-level alias of
/// [`Circuit::head_set`]).
pub fn head_set(c: &Circuit) -> BTreeSet<(usize, usize)> {
    c.head_set()
}
