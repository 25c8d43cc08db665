//! Circuit diffing and checkpoint cohort analytics.
//!
//! A diff classifies attention heads by circuit membership: emergent (in the
//! post circuit only), retained (in both), deactivated (in the base circuit
//! only). Cohort analysis tracks, across an ordered checkpoint series, when
//! each head first enters the circuit, how often it is active, and whether
//! it survives to the final checkpoint.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::circuit::Circuit;
use crate::error::CoreError;
use crate::model::{InterventionSpec, NodeId};
use crate::Result;

/// Default number of heads targeted by an emergent-head intervention.
pub const DEFAULT_INTERVENTION_LIMIT: usize = 10;

/// Head-set difference between a base and a post-trained circuit.
///
/// `emergent` is ordered by descending maximum incident |edge score| in the
/// post circuit (ties by (layer, head)), which is the deterministic ranking
/// used to pick intervention targets; the other two lists are sorted by
/// (layer, head). All three behave as sets (no duplicates).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CircuitDiff {
    pub base_checkpoint: String,
    pub post_checkpoint: String,
    pub emergent: Vec<(usize, usize)>,
    pub retained: Vec<(usize, usize)>,
    pub deactivated: Vec<(usize, usize)>,
}

impl CircuitDiff {
    pub fn emergent_set(&self) -> BTreeSet<(usize, usize)> {
        self.emergent.iter().copied().collect()
    }

    pub fn retained_set(&self) -> BTreeSet<(usize, usize)> {
        self.retained.iter().copied().collect()
    }

    pub fn deactivated_set(&self) -> BTreeSet<(usize, usize)> {
        self.deactivated.iter().copied().collect()
    }
}

fn same_dims(a: &Circuit, b: &Circuit) -> Result<()> {
    if a.config.n_layers != b.config.n_layers || a.config.n_heads != b.config.n_heads {
        return Err(CoreError::ConfigMismatch {
            detail: alloc::format!(
                "head grids differ: {}x{} vs {}x{}",
                a.config.n_layers,
                a.config.n_heads,
                b.config.n_layers,
                b.config.n_heads
            ),
        });
    }
    Ok(())
}

/// Maximum |score| over edges incident to a head in `c` (0 if none).
fn max_incident_score(c: &Circuit, head: (usize, usize)) -> f64 {
    let node = NodeId::AttnHead { layer: head.0, head: head.1 };
    c.edges
        .iter()
        .filter(|(e, _)| e.src == node || e.dst == node)
        .map(|(_, s)| s.abs())
        .fold(0.0, f64::max)
}

/// Classify heads by membership in the base vs post circuits.
pub fn diff(base: &Circuit, post: &Circuit) -> Result<CircuitDiff> {
    same_dims(base, post)?;
    let base_heads = base.head_set();
    let post_heads = post.head_set();

    let mut emergent: Vec<(usize, usize)> =
        post_heads.difference(&base_heads).copied().collect();
    emergent.sort_by(|&a, &b| {
        max_incident_score(post, b)
            .partial_cmp(&max_incident_score(post, a))
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let retained: Vec<(usize, usize)> = post_heads.intersection(&base_heads).copied().collect();
    let deactivated: Vec<(usize, usize)> =
        base_heads.difference(&post_heads).copied().collect();
    Ok(CircuitDiff {
        base_checkpoint: base.meta.checkpoint.clone(),
        post_checkpoint: post.meta.checkpoint.clone(),
        emergent,
        retained,
        deactivated,
    })
}

/// Where a cohort head came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadOrigin {
    /// Present in the base circuit.
    Base,
    /// First appeared in some checkpoint's circuit.
    Emergent,
}

/// Per-head cohort row.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadCohort {
    pub layer: usize,
    pub head: usize,
    pub origin: HeadOrigin,
    /// Checkpoint id where the head first appeared without being in the
    /// base circuit; None for base-origin heads.
    pub first_emergence: Option<String>,
    /// Fraction of checkpoints whose circuit contains the head.
    pub frequency: f64,
    pub active_in_final: bool,
    /// 0/1 activity per checkpoint, in series order.
    pub activity: Vec<bool>,
}

/// Cohort analytics over an ordered checkpoint series.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortReport {
    pub base_checkpoint: String,
    pub checkpoints: Vec<String>,
    /// Per checkpoint: |head_set(ckpt) \ head_set(base)|.
    pub newly_activated: Vec<usize>,
    /// Per checkpoint: |head_set(ckpt) ∩ head_set(base)|.
    pub maintained_original: Vec<usize>,
    /// Rows sorted by (layer, head); covers base ∪ all checkpoint heads.
    pub heads: Vec<HeadCohort>,
}

/// Compute cohort analytics for a base circuit and a checkpoint series.
pub fn cohort(base: &Circuit, series: &[(String, Circuit)]) -> Result<CohortReport> {
    if series.is_empty() {
        return Err(CoreError::EmptySeries);
    }
    for (_, c) in series {
        same_dims(base, c)?;
    }
    let base_heads = base.head_set();
    let ckpt_heads: Vec<BTreeSet<(usize, usize)>> =
        series.iter().map(|(_, c)| c.head_set()).collect();

    let mut all_heads: BTreeSet<(usize, usize)> = base_heads.clone();
    for hs in &ckpt_heads {
        all_heads.extend(hs.iter().copied());
    }

    let newly_activated = ckpt_heads
        .iter()
        .map(|hs| hs.difference(&base_heads).count())
        .collect();
    let maintained_original = ckpt_heads
        .iter()
        .map(|hs| hs.intersection(&base_heads).count())
        .collect();

    let n_ckpts = series.len();
    let heads = all_heads
        .into_iter()
        .map(|(layer, head)| {
            let activity: Vec<bool> =
                ckpt_heads.iter().map(|hs| hs.contains(&(layer, head))).collect();
            let active_count = activity.iter().filter(|&&a| a).count();
            let origin = if base_heads.contains(&(layer, head)) {
                HeadOrigin::Base
            } else {
                HeadOrigin::Emergent
            };
            let first_emergence = if origin == HeadOrigin::Emergent {
                activity
                    .iter()
                    .position(|&a| a)
                    .map(|i| series[i].0.clone())
            } else {
                None
            };
            HeadCohort {
                layer,
                head,
                origin,
                first_emergence,
                frequency: active_count as f64 / n_ckpts as f64,
                active_in_final: *activity.last().expect("non-empty series"),
                activity,
            }
        })
        .collect();

    Ok(CohortReport {
        base_checkpoint: base.meta.checkpoint.clone(),
        checkpoints: series.iter().map(|(id, _)| id.clone()).collect(),
        newly_activated,
        maintained_original,
        heads,
    })
}

/// How an emergent-head intervention acts on its targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InterventionMode {
    Ablate,
    Scale(f64),
}

/// Build an intervention targeting up to `limit` emergent heads, taken in
/// the diff's ranked order.
pub fn emergent_intervention_spec(
    d: &CircuitDiff,
    mode: InterventionMode,
    limit: usize,
) -> Result<InterventionSpec> {
    if limit == 0 {
        return Err(CoreError::Invalid { detail: "intervention limit must be >= 1".into() });
    }
    if d.emergent.is_empty() {
        return Err(CoreError::EmptyEmergentSet);
    }
    let targets = d.emergent.iter().copied().take(limit);
    Ok(match mode {
        InterventionMode::Ablate => InterventionSpec::ablate(targets),
        InterventionMode::Scale(f) => InterventionSpec::scale(targets, f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::CircuitMeta;
    use crate::model::{EdgeId, ModelConfig, PositionalKind, Slot};
    use alloc::collections::BTreeMap;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 4,
            d_model: 8,
            d_head: 2,
            d_mlp: 16,
            vocab_size: 10,
            max_seq_len: 8,
            pos_kind: PositionalKind::LearnedAbsolute,
        }
    }

    /// Circuit containing the given heads, wired I -> head -> O with the
    /// given per-head score.
    fn circuit_with_heads(id: &str, heads: &[(usize, usize, f64)]) -> Circuit {
        let mut nodes = BTreeSet::new();
        let mut edges = BTreeMap::new();
        for &(l, h, s) in heads {
            let node = NodeId::AttnHead { layer: l, head: h };
            nodes.insert(NodeId::Input);
            nodes.insert(node);
            nodes.insert(NodeId::Output);
            edges.insert(EdgeId { src: NodeId::Input, dst: node, slot: Slot::Value }, s);
            edges.insert(EdgeId { src: node, dst: NodeId::Output, slot: Slot::Single }, s);
        }
        Circuit {
            config: config(),
            nodes,
            edges,
            meta: CircuitMeta { checkpoint: id.into(), ..CircuitMeta::default() },
        }
    }

    #[test]
    fn identical_circuits_diff_to_empty_emergent() {
        let c = circuit_with_heads("c", &[(0, 0, 1.0), (1, 2, 0.5)]);
        let d = diff(&c, &c).unwrap();
        assert!(d.emergent.is_empty());
        assert!(d.deactivated.is_empty());
        assert_eq!(d.retained_set(), c.head_set());
    }

    #[test]
    fn diff_set_algebra() {
        let base = circuit_with_heads("base", &[(0, 0, 1.0), (1, 1, 1.0)]);
        let post = circuit_with_heads("post", &[(1, 1, 1.0), (2, 3, 1.0)]);
        let d = diff(&base, &post).unwrap();
        assert_eq!(d.emergent, [(2, 3)]);
        assert_eq!(d.retained, [(1, 1)]);
        assert_eq!(d.deactivated, [(0, 0)]);
        assert_eq!(d.base_checkpoint, "base");
        assert_eq!(d.post_checkpoint, "post");
    }

    #[test]
    fn diff_closure_and_antisymmetry() {
        let a = circuit_with_heads("a", &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0)]);
        let b = circuit_with_heads("b", &[(0, 1, 1.0), (2, 2, 1.0)]);
        let ab = diff(&a, &b).unwrap();
        let ba = diff(&b, &a).unwrap();
        // emergent ∪ retained == post heads; retained ∪ deactivated == base heads
        let mut post_heads = ab.emergent_set();
        post_heads.extend(ab.retained_set());
        assert_eq!(post_heads, b.head_set());
        let mut base_heads = ab.retained_set();
        base_heads.extend(ab.deactivated_set());
        assert_eq!(base_heads, a.head_set());
        // antisymmetry under swap
        assert_eq!(ab.emergent_set(), ba.deactivated_set());
        assert_eq!(ab.deactivated_set(), ba.emergent_set());
        assert_eq!(ab.retained_set(), ba.retained_set());
    }

    #[test]
    fn diff_dimension_mismatch_rejected() {
        let a = circuit_with_heads("a", &[(0, 0, 1.0)]);
        let mut b = circuit_with_heads("b", &[(0, 0, 1.0)]);
        b.config.n_heads = 2;
        assert!(matches!(diff(&a, &b), Err(CoreError::ConfigMismatch { .. })));
    }

    #[test]
    fn emergent_ranked_by_incident_score() {
        let base = circuit_with_heads("base", &[]);
        let post = circuit_with_heads(
            "post",
            &[(0, 0, 0.2), (1, 1, 0.9), (2, 2, 0.5)],
        );
        let d = diff(&base, &post).unwrap();
        assert_eq!(d.emergent, [(1, 1), (2, 2), (0, 0)]);
    }

    #[test]
    fn cohort_single_checkpoint_identical_to_base() {
        let base = circuit_with_heads("base", &[(0, 0, 1.0), (1, 1, 1.0)]);
        let series = [("ck1".to_string(), base.clone())];
        let r = cohort(&base, &series).unwrap();
        assert_eq!(r.newly_activated, [0]);
        assert_eq!(r.maintained_original, [2]);
        assert_eq!(r.heads.len(), 2);
        assert!(r.heads.iter().all(|h| h.origin == HeadOrigin::Base));
        assert!(r.heads.iter().all(|h| h.first_emergence.is_none()));
    }

    #[test]
    fn cohort_hand_computed_series() {
        // base empty; A:{h1}, B:{h1,h2}, C:{h2} with h1=(0,0), h2=(1,1).
        let base = circuit_with_heads("base", &[]);
        let series = [
            ("A".to_string(), circuit_with_heads("A", &[(0, 0, 1.0)])),
            ("B".to_string(), circuit_with_heads("B", &[(0, 0, 1.0), (1, 1, 1.0)])),
            ("C".to_string(), circuit_with_heads("C", &[(1, 1, 1.0)])),
        ];
        let r = cohort(&base, &series).unwrap();
        assert_eq!(r.newly_activated, [1, 2, 1]);
        assert_eq!(r.maintained_original, [0, 0, 0]);
        let h1 = r.heads.iter().find(|h| (h.layer, h.head) == (0, 0)).unwrap();
        let h2 = r.heads.iter().find(|h| (h.layer, h.head) == (1, 1)).unwrap();
        assert_eq!(h1.first_emergence.as_deref(), Some("A"));
        assert_eq!(h2.first_emergence.as_deref(), Some("B"));
        assert!((h1.frequency - 2.0 / 3.0).abs() < 1e-15);
        assert!((h2.frequency - 2.0 / 3.0).abs() < 1e-15);
        assert!(!h1.active_in_final);
        assert!(h2.active_in_final);
        // Counts recompute from the stored activity rows.
        for (i, _) in series.iter().enumerate() {
            let n: usize = r
                .heads
                .iter()
                .filter(|h| h.origin == HeadOrigin::Emergent && h.activity[i])
                .count();
            assert_eq!(n, r.newly_activated[i]);
        }
    }

    #[test]
    fn cohort_rejects_empty_series() {
        let base = circuit_with_heads("base", &[]);
        assert_eq!(cohort(&base, &[]).unwrap_err(), CoreError::EmptySeries);
    }

    #[test]
    fn intervention_spec_from_diff() {
        let base = circuit_with_heads("base", &[]);
        let post = circuit_with_heads("post", &[(0, 0, 0.1), (1, 1, 0.8), (2, 0, 0.4)]);
        let d = diff(&base, &post).unwrap();

        let all = emergent_intervention_spec(&d, InterventionMode::Ablate, 10).unwrap();
        assert_eq!(all.ablate_heads.len(), 3);

        let top2 = emergent_intervention_spec(&d, InterventionMode::Scale(0.5), 2).unwrap();
        assert_eq!(top2.scale_heads.len(), 2);
        assert!(top2.scale_heads.contains_key(&(1, 1)));
        assert!(top2.scale_heads.contains_key(&(2, 0)));
        assert!(top2.scale_heads.values().all(|&f| f == 0.5));

        assert!(emergent_intervention_spec(&d, InterventionMode::Ablate, 0).is_err());
        let empty = diff(&post, &post).unwrap();
        assert_eq!(
            emergent_intervention_spec(&empty, InterventionMode::Ablate, 5).unwrap_err(),
            CoreError::EmptyEmergentSet
        );
    }

    #[test]
    fn scale_one_spec_is_behavioral_noop() {
        use crate::model::{forward, InterventionSpec, ModelParams};
        let params = ModelParams::init(config(), 3).unwrap();
        let base = circuit_with_heads("base", &[]);
        let post = circuit_with_heads("post", &[(0, 1, 0.7)]);
        let d = diff(&base, &post).unwrap();
        let spec = emergent_intervention_spec(&d, InterventionMode::Scale(1.0), 10).unwrap();
        let tokens = [1u32, 2, 3];
        let a = forward(&params, &tokens, &spec).unwrap();
        let b = forward(&params, &tokens, &InterventionSpec::empty()).unwrap();
        assert!(a.log_probs().bits_eq(b.log_probs()));
    }

    #[test]
    fn default_limit_matches_reference_practice() {
        assert_eq!(DEFAULT_INTERVENTION_LIMIT, 10);
    }
}
