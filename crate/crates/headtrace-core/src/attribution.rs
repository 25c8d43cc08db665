//! Edge attribution over clean/corrupted prompt pairs.
//!
//! Scores follow the integrated-gradients recipe: interpolate the input-node
//! output along the straight line from the corrupted activation to the clean
//! one, average the loss gradients at each destination's input across the
//! interpolation steps, and dot the average with the source's activation
//! difference. The loss is a KL divergence at the final position against the
//! clean run's output distribution, so it is exactly zero at the clean
//! endpoint. A score estimates the loss change from replacing one edge's
//! source contribution with its corrupted value; important edges score
//! positive.
//!
//! [`exact_edge_effect`] is the matching causal oracle: the loss actually
//! incurred when exactly one edge's contribution is replaced by its
//! corrupted counterpart.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::model::{
    forward, forward_traced, ActivationCache, EdgeId, InterventionSpec, LossDirection,
    ModelConfig, ModelParams, NodeId, Slot,
};
use crate::tensor::Tensor;
use crate::Result;

/// Default number of Riemann-sum steps for the path integral.
pub const DEFAULT_IG_STEPS: usize = 100;

/// A clean/corrupted prompt pair. Both sides must have equal length so
/// activations align position-by-position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub clean: Vec<u32>,
    pub corrupted: Vec<u32>,
    pub label: String,
}

impl PromptPair {
    pub fn new(clean: Vec<u32>, corrupted: Vec<u32>, label: impl Into<String>) -> Result<Self> {
        if clean.len() != corrupted.len() {
            return Err(CoreError::PairLengthMismatch {
                clean: clean.len(),
                corrupted: corrupted.len(),
            });
        }
        Ok(PromptPair { clean, corrupted, label: label.into() })
    }
}

/// Which token positions contribute to an edge score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScorePositions {
    /// Sum over every position (reference formulation).
    #[default]
    All,
    /// Only the final position.
    FinalOnly,
}

/// Attribution configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionConfig {
    /// Riemann-sum steps m.
    pub ig_steps: usize,
    pub score_positions: ScorePositions,
    pub loss_direction: LossDirection,
    /// Replace each q/k/v edge score with the q+k+v sum for its (src, dst),
    /// for comparison against formulations that do not split slots.
    pub collapse_qkv: bool,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            ig_steps: DEFAULT_IG_STEPS,
            score_positions: ScorePositions::All,
            loss_direction: LossDirection::RefToCurrent,
            collapse_qkv: false,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(CoreError::Invalid { detail: "ig_steps must be >= 1".into() });
        }
        Ok(())
    }
}

/// Signed edge scores with provenance.
#[derive(Clone, Debug)]
pub struct EdgeScores {
    pub model_config: ModelConfig,
    pub attribution: AttributionConfig,
    /// Checkpoint the scores were computed against.
    pub checkpoint: String,
    /// Hash of the prompt-pair set (set by the caller that loaded the pairs).
    pub pairs_hash: String,
    pub scores: BTreeMap<EdgeId, f64>,
}

impl EdgeScores {
    /// q/k/v scores summed per (src, dst); Single-slot edges pass through.
    pub fn collapsed_qkv(&self) -> BTreeMap<(NodeId, NodeId), f64> {
        let mut out: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
        for (edge, &s) in &self.scores {
            *out.entry((edge.src, edge.dst)).or_insert(0.0) += s;
        }
        out
    }
}

/// Run both sides of a pair with no interventions.
pub fn run_pair(
    params: &ModelParams,
    pair: &PromptPair,
) -> Result<(ActivationCache, ActivationCache)> {
    if pair.clean.len() != pair.corrupted.len() {
        return Err(CoreError::PairLengthMismatch {
            clean: pair.clean.len(),
            corrupted: pair.corrupted.len(),
        });
    }
    let clean = forward(params, &pair.clean, &InterventionSpec::empty())?;
    let corrupted = forward(params, &pair.corrupted, &InterventionSpec::empty())?;
    Ok((clean, corrupted))
}

/// Clean-minus-corrupted output difference for one node.
pub fn delta_z(
    clean: &ActivationCache,
    corrupted: &ActivationCache,
    node: NodeId,
) -> Option<Tensor> {
    let a = clean.output(node)?;
    let b = corrupted.output(node)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data).ok()
}

/// KL(p || q) from a probability vector and log-probabilities, off-tape.
pub fn kl_scalar(p: &[f64], log_q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), log_q.len());
    let mut s = 0.0;
    for (&pi, &lq) in p.iter().zip(log_q) {
        if pi > 0.0 {
            s += pi * (libm::log(pi) - lq);
        }
    }
    s
}

/// Probability vector of the final position from a cache.
pub(crate) fn final_probs(cache: &ActivationCache) -> Tensor {
    let logp = cache.final_log_probs();
    let probs: Vec<f64> = logp.data().iter().map(|&x| libm::exp(x)).collect();
    // Renormalize away the last few ulps so downstream distribution checks
    // see an exact simplex point.
    let z: f64 = probs.iter().sum();
    let data: Vec<f64> = probs.iter().map(|&p| p / z).collect();
    Tensor::new(logp.shape().to_vec(), data).expect("softmax output is finite")
}

struct PairScorer<'a> {
    params: &'a ModelParams,
    cfg: &'a AttributionConfig,
}

impl PairScorer<'_> {
    /// Per-pair scores for every edge.
    fn score_pair(&self, pair: &PromptPair) -> Result<BTreeMap<EdgeId, f64>> {
        let config = &self.params.config;
        let (clean, corrupted) = run_pair(self.params, pair)?;
        let p_clean = final_probs(&clean);

        let z_clean = clean.output(NodeId::Input).expect("input output").clone();
        let z_corr = corrupted.output(NodeId::Input).expect("input output").clone();
        let m = self.cfg.ig_steps;

        // Average the loss gradient at every (node, slot) input across the
        // interpolation path z' + (k/m)(z - z').
        let mut grad_sums: BTreeMap<(NodeId, Slot), Vec<f64>> = BTreeMap::new();
        for k in 1..=m {
            let alpha = k as f64 / m as f64;
            let interp: Vec<f64> = z_corr
                .data()
                .iter()
                .zip(z_clean.data())
                .map(|(&zc, &z)| zc + alpha * (z - zc))
                .collect();
            let interp = Tensor::new(z_clean.shape().to_vec(), interp)?;
            let mut spec = InterventionSpec::empty();
            spec.patch_nodes.insert(NodeId::Input, interp);
            let traced = forward_traced(self.params, &pair.clean, &spec)?;
            let (cache, _loss) =
                traced.backward_kl(self.params, &spec, &p_clean, self.cfg.loss_direction)?;
            for node in config.nodes() {
                for &slot in config.slots_of(node) {
                    let g = cache
                        .input_grad(node, slot)
                        .expect("traced cache has input gradients");
                    let entry = grad_sums
                        .entry((node, slot))
                        .or_insert_with(|| alloc::vec![0.0; g.numel()]);
                    for (acc, gv) in entry.iter_mut().zip(g.data()) {
                        *acc += gv;
                    }
                }
            }
        }

        // Dot each edge's corrupted-minus-clean source difference with the
        // averaged destination-input gradient: the first-order estimate of
        // the loss change from corrupting that edge, so important edges
        // score positive (matching the exact-patching oracle's orientation).
        let d_model = config.d_model;
        let seq = pair.clean.len();
        let rows: Vec<usize> = match self.cfg.score_positions {
            ScorePositions::All => (0..seq).collect(),
            ScorePositions::FinalOnly => alloc::vec![seq - 1],
        };
        let mut deltas: BTreeMap<NodeId, Tensor> = BTreeMap::new();
        for node in config.nodes() {
            if let Some(d) = delta_z(&clean, &corrupted, node) {
                deltas.insert(node, d);
            }
        }
        let mut scores = BTreeMap::new();
        for edge in config.edges() {
            let delta = &deltas[&edge.src];
            let avg = &grad_sums[&(edge.dst, edge.slot)];
            let mut s = 0.0;
            for &r in &rows {
                for c in 0..d_model {
                    let i = r * d_model + c;
                    s -= delta.data()[i] * avg[i] / m as f64;
                }
            }
            scores.insert(edge, s);
        }
        if self.cfg.collapse_qkv {
            let merged: BTreeMap<(NodeId, NodeId), f64> = {
                let mut acc: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
                for (e, &s) in &scores {
                    *acc.entry((e.src, e.dst)).or_insert(0.0) += s;
                }
                acc
            };
            for (e, s) in scores.iter_mut() {
                *s = merged[&(e.src, e.dst)];
            }
        }
        Ok(scores)
    }
}

/// EAP-IG scores over a pair set: per-pair path-integrated edge scores,
/// averaged with equal weight in pair-index order.
pub fn eapig_scores(
    params: &ModelParams,
    pairs: &[PromptPair],
    cfg: &AttributionConfig,
) -> Result<EdgeScores> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(CoreError::EmptyPairList);
    }
    let scorer = PairScorer { params, cfg };
    let mut totals: BTreeMap<EdgeId, f64> = params
        .config
        .edges()
        .into_iter()
        .map(|e| (e, 0.0))
        .collect();
    for (i, pair) in pairs.iter().enumerate() {
        let per_pair = scorer.score_pair(pair).map_err(|e| match e {
            CoreError::NonFinite { .. } => CoreError::NonFiniteInPair { pair_index: i },
            other => other,
        })?;
        for (edge, s) in per_pair {
            *totals.get_mut(&edge).expect("edge set is fixed") += s;
        }
    }
    let n = pairs.len() as f64;
    for s in totals.values_mut() {
        *s /= n;
    }
    Ok(EdgeScores {
        model_config: params.config.clone(),
        attribution: cfg.clone(),
        checkpoint: String::new(),
        pairs_hash: String::new(),
        scores: totals,
    })
}

/// Ground-truth causal effect of corrupting exactly one edge: the loss of a
/// clean run with that edge's contribution patched to its corrupted-run
/// value (the clean run's own loss is zero by construction).
pub fn exact_edge_effect(params: &ModelParams, pair: &PromptPair, edge: &EdgeId) -> Result<f64> {
    params.config.check_edge(edge)?;
    let (clean, corrupted) = run_pair(params, pair)?;
    let p_clean = final_probs(&clean);
    let replacement = corrupted
        .output(edge.src)
        .expect("source output present")
        .clone();
    let mut spec = InterventionSpec::empty();
    spec.patch_edges.insert(*edge, replacement);
    let patched = forward(params, &pair.clean, &spec)?;
    Ok(kl_scalar(p_clean.data(), patched.final_log_probs().data()))
}
