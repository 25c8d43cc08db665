//! Training steps that produce the checkpoint series: SFT cross-entropy and
//! GRPO with group-normalized advantages, a clipped token-level ratio
//! objective, and an exact KL penalty against a frozen reference policy.
//!
//! The optimizer is plain SGD; the objective is assembled on the autodiff
//! tape, so the GRPO gradient flows through the new policy's log-probs and
//! the full-vocabulary KL term exactly as written.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::model::{
    forward, forward_on_tape, sample_with_rng, InterventionSpec, ModelParams, SamplerConfig,
};
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::Result;

/// Default GRPO group size.
pub const DEFAULT_GROUP_SIZE: usize = 16;
/// Default checkpoint cadence in optimizer steps.
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 100;
/// Default SFT learning rate for the toy scale, tuned so a single 16-token
/// example memorizes to < 0.01 nats well inside 2000 steps.
pub const DEFAULT_SFT_LR: f64 = 0.02;

/// GRPO hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GrpoConfig {
    /// Responses sampled per prompt (G).
    pub group_size: usize,
    /// Ratio clip half-width (epsilon).
    pub clip_epsilon: f64,
    /// KL penalty coefficient (beta).
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    /// Scalar applied to verifier rewards.
    pub reward_weight: f64,
    /// Identifier of the reward function, recorded for provenance.
    pub reward_fn: String,
    /// Identifier of the frozen reference checkpoint.
    pub reference_checkpoint: String,
    /// Rollout sampler; its seed field is ignored in favor of per-step
    /// derived streams.
    pub sampler: SamplerConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: DEFAULT_GROUP_SIZE,
            clip_epsilon: 0.2,
            kl_coefficient: 0.01,
            learning_rate: 1e-3,
            reward_weight: 1.0,
            reward_fn: String::new(),
            reference_checkpoint: String::new(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(CoreError::GroupTooSmall { got: self.group_size });
        }
        if !(self.clip_epsilon > 0.0) || !self.clip_epsilon.is_finite() {
            return Err(CoreError::Invalid {
                detail: format!("clip_epsilon {} must be > 0", self.clip_epsilon),
            });
        }
        if !(self.kl_coefficient >= 0.0) || !self.kl_coefficient.is_finite() {
            return Err(CoreError::Invalid {
                detail: format!("kl_coefficient {} must be >= 0", self.kl_coefficient),
            });
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(CoreError::Invalid {
                detail: format!("learning_rate {} must be >= 0", self.learning_rate),
            });
        }
        if self.sampler.max_new_tokens == 0 {
            return Err(CoreError::Invalid {
                detail: "sampler.max_new_tokens must be >= 1".into(),
            });
        }
        self.sampler.validate()
    }
}

/// Group-normalized advantages: (R_i - mean(R)) / std(R) with the population
/// standard deviation. A degenerate group (std below 1e-8) yields all-zero
/// advantages rather than an error; constant-reward groups are routine early
/// in training. The same advantage is shared by every token of response i.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(CoreError::GroupTooSmall { got: g });
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(CoreError::NonFinite { op: "grpo_advantages" });
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = libm::sqrt(var);
    if std < 1e-8 {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Token-level policy ratios exp(logp_new - logp_old).
pub fn policy_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<Vec<f64>> {
    if logp_new.len() != logp_old.len() {
        return Err(CoreError::LengthMismatch {
            left: logp_new.len(),
            right: logp_old.len(),
        });
    }
    Ok(logp_new
        .iter()
        .zip(logp_old)
        .map(|(n, o)| libm::exp(n - o))
        .collect())
}

/// One prompt's sampled group, with everything the objective needs.
///
/// `theta_rows` and `ref_rows` are full-vocabulary log-prob rows aligned to
/// response tokens (row t conditions on the prompt plus tokens before t);
/// `logp_old` holds the chosen-token log-probs under the sampling policy.
#[derive(Clone, Debug)]
pub struct GrpoBatch {
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    pub logp_old: Vec<Vec<f64>>,
    pub theta_rows: Vec<Tensor>,
    pub ref_rows: Vec<Tensor>,
}

impl GrpoBatch {
    pub fn validate(&self) -> Result<()> {
        let g = self.responses.len();
        if g < 2 {
            return Err(CoreError::GroupTooSmall { got: g });
        }
        if self.rewards.len() != g || self.logp_old.len() != g
            || self.theta_rows.len() != g || self.ref_rows.len() != g
        {
            return Err(CoreError::Invalid {
                detail: "GRPO batch arrays disagree on group size".into(),
            });
        }
        for i in 0..g {
            let t = self.responses[i].len();
            if t == 0 {
                return Err(CoreError::Invalid { detail: format!("response {i} is empty") });
            }
            let (tr, _) = self.theta_rows[i].dims2()?;
            let (rr, _) = self.ref_rows[i].dims2()?;
            if self.logp_old[i].len() != t || tr != t || rr != t {
                return Err(CoreError::LengthMismatch { left: t, right: self.logp_old[i].len().min(tr).min(rr) });
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(CoreError::NonFinite { op: "GrpoBatch rewards" });
        }
        Ok(())
    }
}

/// Per-token diagnostics from one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrpoDiagnostics {
    pub advantages: Vec<f64>,
    /// Token-level ratios per response.
    pub ratios: Vec<Vec<f64>>,
    /// Whether the clipped branch was the active minimum for each token.
    pub clipped: Vec<Vec<bool>>,
    /// Exact per-token KL(new || ref) per response.
    pub kl_per_token: Vec<Vec<f64>>,
    /// Flat mean of per-token KL over all response tokens.
    pub mean_kl: f64,
    /// Policy-gradient surrogate before the KL penalty.
    pub surrogate: f64,
}

/// Shared assembly: surrogate and KL contributions of one response.
/// Returns (sum over tokens of the clipped terms, sum over tokens of KL).
fn response_terms_on_tape(
    tape: &mut Tape,
    rows: TensorId,
    response: &[u32],
    logp_old: &[f64],
    advantage: f64,
    ref_rows: &Tensor,
    clip_epsilon: f64,
) -> Result<(TensorId, TensorId)> {
    let t_len = response.len();
    let picks: Vec<(usize, usize)> = response
        .iter()
        .enumerate()
        .map(|(t, &tok)| (t, tok as usize))
        .collect();
    let chosen = tape.gather_elems(rows, &picks)?;
    let old = tape.input(Tensor::new(vec![t_len], logp_old.to_vec())?);
    let diff = tape.sub(chosen, old)?;
    let ratio = tape.exp(diff)?;
    let adv = tape.input(Tensor::new(vec![t_len], vec![advantage; t_len])?);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clip_elem(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)?;
    let clipped = tape.mul(clipped_ratio, adv)?;
    let min_terms = tape.min_elem(unclipped, clipped)?;
    let pg_sum = tape.sum_all(min_terms)?;

    let ref_const = tape.input(ref_rows.clone());
    let p_new = tape.exp(rows)?;
    let log_diff = tape.sub(rows, ref_const)?;
    let prod = tape.mul(p_new, log_diff)?;
    let kl_sum = tape.sum_all(prod)?;
    Ok((pg_sum, kl_sum))
}

fn batch_diagnostics(batch: &GrpoBatch, advantages: &[f64], eps: f64) -> Result<GrpoDiagnostics> {
    let mut ratios = Vec::new();
    let mut clipped = Vec::new();
    let mut kl_per_token = Vec::new();
    let mut kl_total = 0.0;
    let mut tokens_total = 0usize;
    let mut surrogate = 0.0;
    for i in 0..batch.responses.len() {
        let t_len = batch.responses[i].len();
        let (_, v) = batch.theta_rows[i].dims2()?;
        let new_chosen: Vec<f64> = batch.responses[i]
            .iter()
            .enumerate()
            .map(|(t, &tok)| batch.theta_rows[i].data()[t * v + tok as usize])
            .collect();
        let r = policy_ratio(&new_chosen, &batch.logp_old[i])?;
        let flags: Vec<bool> = r
            .iter()
            .map(|&x| x < 1.0 - eps || x > 1.0 + eps)
            .collect();
        let mut resp_sum = 0.0;
        for t in 0..t_len {
            let c = r[t].clamp(1.0 - eps, 1.0 + eps);
            resp_sum += (r[t] * advantages[i]).min(c * advantages[i]);
        }
        surrogate += resp_sum / t_len as f64;
        let mut kls = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut kl = 0.0;
            for c in 0..v {
                let ln_new = batch.theta_rows[i].data()[t * v + c];
                let ln_ref = batch.ref_rows[i].data()[t * v + c];
                kl += libm::exp(ln_new) * (ln_new - ln_ref);
            }
            kl_total += kl;
            kls.push(kl);
        }
        tokens_total += t_len;
        ratios.push(r);
        clipped.push(flags);
        kl_per_token.push(kls);
    }
    surrogate /= batch.responses.len() as f64;
    Ok(GrpoDiagnostics {
        advantages: advantages.to_vec(),
        ratios,
        clipped,
        kl_per_token,
        mean_kl: kl_total / tokens_total as f64,
        surrogate,
    })
}

/// The GRPO objective for one batch:
///
/// J = (1/G) Σ_i (1/|o_i|) Σ_t min(r Â, clip(r, 1-ε, 1+ε) Â) - β KL(new‖ref)
///
/// with the KL term the exact full-vocabulary divergence averaged over all
/// response tokens. Advantages are computed from the batch rewards.
pub fn grpo_objective(batch: &GrpoBatch, cfg: &GrpoConfig) -> Result<(f64, GrpoDiagnostics)> {
    cfg.validate()?;
    batch.validate()?;
    let advantages = grpo_advantages(&batch.rewards)?;
    let mut tape = Tape::new();
    let row_ids: Vec<TensorId> = batch
        .theta_rows
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect();
    let j = objective_from_rows(&mut tape, &row_ids, batch, &advantages, cfg)?;
    let diag = batch_diagnostics(batch, &advantages, cfg.clip_epsilon)?;
    Ok((tape.value(j).item(), diag))
}

/// Assemble the full objective given row tensors already on a tape.
fn objective_from_rows(
    tape: &mut Tape,
    row_ids: &[TensorId],
    batch: &GrpoBatch,
    advantages: &[f64],
    cfg: &GrpoConfig,
) -> Result<TensorId> {
    let g = batch.responses.len();
    let mut pg_terms = Vec::with_capacity(g);
    let mut kl_terms = Vec::with_capacity(g);
    let mut total_tokens = 0usize;
    for i in 0..g {
        let (pg_sum, kl_sum) = response_terms_on_tape(
            tape,
            row_ids[i],
            &batch.responses[i],
            &batch.logp_old[i],
            advantages[i],
            &batch.ref_rows[i],
            cfg.clip_epsilon,
        )?;
        let t_len = batch.responses[i].len();
        total_tokens += t_len;
        pg_terms.push(tape.scale(pg_sum, 1.0 / t_len as f64)?);
        kl_terms.push(kl_sum);
    }
    let pg = tape.add_n(&pg_terms)?;
    let pg_mean = tape.scale(pg, 1.0 / g as f64)?;
    let kl = tape.add_n(&kl_terms)?;
    let kl_mean = tape.scale(kl, 1.0 / total_tokens as f64)?;
    let kl_pen = tape.scale(kl_mean, cfg.kl_coefficient)?;
    tape.sub(pg_mean, kl_pen)
}

/// One prompt's rollout set inside a GRPO step.
#[derive(Clone, Debug)]
pub struct PromptRollouts {
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
}

/// Log-prob rows for the response span of `prompt ++ response` under a
/// fixed policy, plus the chosen-token log-probs.
fn response_rows(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
) -> Result<(Tensor, Vec<f64>)> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(response);
    let cache = forward(params, &seq, &InterventionSpec::empty())?;
    let (_, v) = cache.log_probs().dims2()?;
    let start = prompt.len() - 1;
    let t_len = response.len();
    let rows = Tensor::matrix(
        t_len,
        v,
        cache.log_probs().data()[start * v..(start + t_len) * v].to_vec(),
    )?;
    let chosen = response
        .iter()
        .enumerate()
        .map(|(t, &tok)| rows.data()[t * v + tok as usize])
        .collect();
    Ok((rows, chosen))
}

/// Evaluate the mean GRPO objective over prompts at `params`, holding the
/// sampling policy (`old_params`) and reference policy fixed. Returns the
/// objective value, per-prompt diagnostics, and the prompt-mean gradient
/// seam used by [`grpo_step`].
fn build_step_tape(
    params: &ModelParams,
    old_params: &ModelParams,
    ref_params: &ModelParams,
    rollouts: &[PromptRollouts],
    cfg: &GrpoConfig,
) -> Result<(Tape, crate::model::ParamIds, TensorId, Vec<GrpoDiagnostics>)> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let mut per_prompt_j = Vec::with_capacity(rollouts.len());
    let mut diags = Vec::with_capacity(rollouts.len());
    for roll in rollouts {
        let advantages = grpo_advantages(&roll.rewards)?;
        let g = roll.responses.len();
        let mut batch = GrpoBatch {
            prompt: roll.prompt.clone(),
            responses: roll.responses.clone(),
            rewards: roll.rewards.clone(),
            logp_old: Vec::with_capacity(g),
            theta_rows: Vec::with_capacity(g),
            ref_rows: Vec::with_capacity(g),
        };
        let mut row_ids = Vec::with_capacity(g);
        for response in &roll.responses {
            let mut seq = roll.prompt.clone();
            seq.extend_from_slice(response);
            let handles =
                forward_on_tape(&mut tape, params, &ids, &seq, &InterventionSpec::empty())?;
            let rows_id =
                tape.slice_rows(handles.log_probs, roll.prompt.len() - 1, response.len())?;
            row_ids.push(rows_id);
            batch.theta_rows.push(tape.value(rows_id).clone());
            let (_, old_chosen) = response_rows(old_params, &roll.prompt, response)?;
            batch.logp_old.push(old_chosen);
            let (ref_rows, _) = response_rows(ref_params, &roll.prompt, response)?;
            batch.ref_rows.push(ref_rows);
        }
        let j = objective_from_rows(&mut tape, &row_ids, &batch, &advantages, cfg)?;
        per_prompt_j.push(j);
        diags.push(batch_diagnostics(&batch, &advantages, cfg.clip_epsilon)?);
    }
    let sum = tape.add_n(&per_prompt_j)?;
    let j_mean = tape.scale(sum, 1.0 / rollouts.len() as f64)?;
    Ok((tape, ids, j_mean, diags))
}

/// Objective value at `params` for fixed rollouts and fixed old/reference
/// policies (no update). The finite-difference seam for gradient checks.
pub fn grpo_objective_at(
    params: &ModelParams,
    old_params: &ModelParams,
    ref_params: &ModelParams,
    rollouts: &[PromptRollouts],
    cfg: &GrpoConfig,
) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let (tape, _, j, _) = build_step_tape(params, old_params, ref_params, rollouts, cfg)?;
    Ok(tape.value(j).item())
}

/// Summary statistics of one GRPO step.
#[derive(Clone, Debug, PartialEq)]
pub struct GrpoStepStats {
    pub mean_reward: f64,
    pub objective: f64,
    pub mean_kl: f64,
    /// Fraction of response tokens whose ratio left the clip range.
    pub clip_fraction: f64,
}

/// One GRPO step: sample G responses per prompt from the pre-update policy,
/// score them with the verifier reward, and ascend the clipped objective.
/// The reference policy is whatever `ref_params` the caller fixed at run
/// start; the old policy is refreshed every step.
///
/// Rollout streams are derived from (step_seed, prompt index, sample index)
/// so runs are reproducible regardless of scheduling.
pub fn grpo_step(
    params: &mut ModelParams,
    ref_params: &ModelParams,
    prompts: &[Vec<u32>],
    cfg: &GrpoConfig,
    reward: &dyn Fn(&[u32], &[u32]) -> Result<f64>,
    step_seed: u64,
) -> Result<GrpoStepStats> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let old = params.clone();
    let mut rollouts = Vec::with_capacity(prompts.len());
    let mut reward_sum = 0.0;
    for (pi, prompt) in prompts.iter().enumerate() {
        let mut responses = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        for gi in 0..cfg.group_size {
            let mut rng = Rng::derive(step_seed, (pi * cfg.group_size + gi) as u64);
            let response = sample_with_rng(
                &old,
                prompt,
                &cfg.sampler,
                &InterventionSpec::empty(),
                &mut rng,
            )?;
            let r = reward(prompt, &response)? * cfg.reward_weight;
            reward_sum += r;
            responses.push(response);
            rewards.push(r);
        }
        rollouts.push(PromptRollouts { prompt: prompt.clone(), responses, rewards });
    }
    let (tape, ids, j, diags) = build_step_tape(params, &old, ref_params, &rollouts, cfg)?;
    let objective = tape.value(j).item();
    let grads = tape.backward(j)?;
    params.apply_step(&ids, &grads, cfg.learning_rate, 1.0)?;

    let mut kl_sum = 0.0;
    let mut clip_count = 0usize;
    let mut token_count = 0usize;
    for d in &diags {
        for (r, fl) in d.ratios.iter().zip(&d.clipped) {
            token_count += r.len();
            clip_count += fl.iter().filter(|&&f| f).count();
        }
        for kls in &d.kl_per_token {
            kl_sum += kls.iter().sum::<f64>();
        }
    }
    Ok(GrpoStepStats {
        mean_reward: reward_sum / (prompts.len() * cfg.group_size) as f64,
        objective,
        mean_kl: kl_sum / token_count as f64,
        clip_fraction: clip_count as f64 / token_count as f64,
    })
}

/// One SFT step: SGD on mean next-token cross-entropy over target positions.
/// Returns the pre-step loss.
pub fn sft_step(
    params: &mut ModelParams,
    batch: &[(Vec<u32>, Vec<u32>)],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(CoreError::Invalid { detail: format!("learning rate {lr} must be >= 0") });
    }
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let mut nll_terms = Vec::with_capacity(batch.len());
    let mut total_targets = 0usize;
    for (prompt, target) in batch {
        if prompt.is_empty() || target.is_empty() {
            return Err(CoreError::Invalid {
                detail: "SFT examples need a non-empty prompt and target".into(),
            });
        }
        let mut seq = prompt.clone();
        seq.extend_from_slice(target);
        let handles =
            forward_on_tape(&mut tape, params, &ids, &seq, &InterventionSpec::empty())?;
        let picks: Vec<(usize, usize)> = target
            .iter()
            .enumerate()
            .map(|(j, &tok)| (prompt.len() + j - 1, tok as usize))
            .collect();
        total_targets += picks.len();
        nll_terms.push(tape.nll_sum(handles.log_probs, &picks)?);
    }
    let total = tape.add_n(&nll_terms)?;
    let loss = tape.scale(total, 1.0 / total_targets as f64)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    params.apply_step(&ids, &grads, lr, -1.0)?;
    Ok(loss_value)
}

/// Training method recorded in run manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMethod {
    Sft,
    Grpo,
}

impl TrainMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMethod::Sft => "sft",
            TrainMethod::Grpo => "grpo",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMethod> {
        match s {
            "sft" => Some(TrainMethod::Sft),
            "grpo" => Some(TrainMethod::Grpo),
            _ => None,
        }
    }
}

/// Ordered record of a training run's saved checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunManifest {
    pub run_id: String,
    pub base_checkpoint: String,
    pub method: TrainMethod,
    /// (step, checkpoint path), strictly increasing in step.
    pub checkpoints: Vec<(u64, String)>,
    /// Config snapshot as ordered key-value pairs.
    pub config: Vec<(String, String)>,
}

impl TrainRunManifest {
    pub fn validate(&self) -> Result<()> {
        for w in self.checkpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CoreError::Invalid {
                    detail: format!("checkpoint steps not increasing: {} then {}", w[0].0, w[1].0),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionalKind};
    use crate::rng::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 12,
            vocab_size: 9,
            max_seq_len: 10,
            pos_kind: PositionalKind::LearnedAbsolute,
        }
    }

    #[test]
    fn advantages_degenerate_group_is_zero() {
        assert_eq!(grpo_advantages(&[0.7, 0.7, 0.7, 0.7]).unwrap(), [0.0; 4]);
    }

    #[test]
    fn advantages_two_point_case() {
        // mean 0.5, population std 0.5.
        let a = grpo_advantages(&[0.0, 1.0]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_three_point_case() {
        // mean 2, population std sqrt(2/3).
        let a = grpo_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!((a[0] + 1.0 / s).abs() < 1e-12);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - 1.0 / s).abs() < 1e-12);
        assert!((a[2] - 1.224744871391589).abs() < 1e-9);
    }

    #[test]
    fn advantages_normalization_and_invariances() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let g = 2 + rng.below(14);
            let r: Vec<f64> = (0..g).map(|_| rng.uniform(5.0)).collect();
            let a = grpo_advantages(&r).unwrap();
            if a.iter().all(|&x| x == 0.0) {
                continue;
            }
            let mean = a.iter().sum::<f64>() / g as f64;
            let var = a.iter().map(|x| x * x).sum::<f64>() / g as f64 - mean * mean;
            assert!(mean.abs() < 1e-12);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);

            // Positive-affine invariance.
            let scale = 0.3 + rng.next_f64() * 4.0;
            let shift = rng.uniform(10.0);
            let transformed: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let a2 = grpo_advantages(&transformed).unwrap();
            for (x, y) in a.iter().zip(&a2) {
                assert!((x - y).abs() < 1e-9);
            }
            // Antisymmetry.
            let negated: Vec<f64> = r.iter().map(|x| -x).collect();
            let a3 = grpo_advantages(&negated).unwrap();
            for (x, y) in a.iter().zip(&a3) {
                assert!((x + y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn advantages_group_too_small() {
        assert_eq!(
            grpo_advantages(&[1.0]).unwrap_err(),
            CoreError::GroupTooSmall { got: 1 }
        );
    }

    #[test]
    fn policy_ratio_identities() {
        let lp = [-1.5, -0.25, -3.0];
        assert_eq!(policy_ratio(&lp, &lp).unwrap(), [1.0, 1.0, 1.0]);
        let doubled: Vec<f64> = lp.iter().map(|x| x + core::f64::consts::LN_2).collect();
        for r in policy_ratio(&doubled, &lp).unwrap() {
            assert!((r - 2.0).abs() < 1e-12);
        }
        let mut rng = Rng::new(5);
        let a: Vec<f64> = (0..20).map(|_| rng.uniform(2.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.uniform(2.0)).collect();
        let r = policy_ratio(&a, &b).unwrap();
        for i in 0..20 {
            assert!((r[i] - a[i].exp() / b[i].exp()).abs() < 1e-12 * r[i].max(1.0));
            assert!(r[i] > 0.0);
        }
        assert!(policy_ratio(&a, &b[..10]).is_err());
    }

    /// Uniform log-prob rows over a vocab.
    fn uniform_rows(t: usize, v: usize) -> Tensor {
        let lp = -(v as f64).ln();
        Tensor::matrix(t, v, vec![lp; t * v]).unwrap()
    }

    #[test]
    fn objective_zero_for_identity_policies() {
        let v = 7usize;
        let rows = uniform_rows(3, v);
        let old: Vec<f64> = vec![-(v as f64).ln(); 3];
        let batch = GrpoBatch {
            prompt: vec![1, 2],
            responses: vec![vec![0, 1, 2], vec![3, 4, 5], vec![1, 1, 1], vec![6, 0, 2]],
            rewards: vec![0.0, 1.0, 1.0, 0.0],
            logp_old: vec![old.clone(); 4],
            theta_rows: vec![rows.clone(); 4],
            ref_rows: vec![rows.clone(); 4],
        };
        let cfg = GrpoConfig { group_size: 4, ..Default::default() };
        let (j, diag) = grpo_objective(&batch, &cfg).unwrap();
        assert!(j.abs() < 1e-12, "{j}");
        assert!(diag.mean_kl.abs() < 1e-15);
        assert!(diag.ratios.iter().flatten().all(|&r| r == 1.0));
    }

    #[test]
    fn objective_reduces_to_unclipped_surrogate() {
        let v = 5usize;
        let mut rng = Rng::new(11);
        let mk_rows = |rng: &mut Rng, t: usize| {
            let mut data = vec![0.0; t * v];
            rng.fill_uniform(&mut data, 1.0);
            // log-softmax the rows so they are genuine log-probs
            for row in data.chunks_mut(v) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            Tensor::matrix(t, v, data).unwrap()
        };
        let t_len = 4;
        let theta: Vec<Tensor> = (0..3).map(|_| mk_rows(&mut rng, t_len)).collect();
        let refr: Vec<Tensor> = (0..3).map(|_| mk_rows(&mut rng, t_len)).collect();
        let old: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..t_len).map(|_| -1.0 - rng.next_f64()).collect())
            .collect();
        let responses: Vec<Vec<u32>> = (0..3)
            .map(|_| (0..t_len).map(|_| rng.below(v) as u32).collect())
            .collect();
        let rewards = vec![0.0, 1.0, 0.5];
        let batch = GrpoBatch {
            prompt: vec![0],
            responses: responses.clone(),
            rewards: rewards.clone(),
            logp_old: old.clone(),
            theta_rows: theta.clone(),
            ref_rows: refr,
        };
        let cfg = GrpoConfig {
            group_size: 3,
            kl_coefficient: 0.0,
            clip_epsilon: 1e9,
            ..Default::default()
        };
        let (j, _) = grpo_objective(&batch, &cfg).unwrap();
        // Unclipped surrogate computed directly.
        let adv = grpo_advantages(&rewards).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            let mut resp = 0.0;
            for t in 0..t_len {
                let new_lp = theta[i].data()[t * v + responses[i][t] as usize];
                resp += (new_lp - old[i][t]).exp() * adv[i];
            }
            expect += resp / t_len as f64;
        }
        expect /= 3.0;
        assert!((j - expect).abs() < 1e-12, "{j} vs {expect}");
    }

    #[test]
    fn clip_arithmetic_case() {
        // Two responses; the second has advantage +1 (rewards [0,1]) and a
        // single token at ratio 1.5 with eps=0.2: its term is min(1.5, 1.2).
        let v = 4usize;
        let uniform = uniform_rows(1, v);
        let lp_u = -(v as f64).ln();
        // Response 1: ratio exactly 1. Response 2: ratio 1.5.
        let batch = GrpoBatch {
            prompt: vec![0],
            responses: vec![vec![2], vec![2]],
            rewards: vec![0.0, 1.0],
            logp_old: vec![vec![lp_u], vec![lp_u - 1.5f64.ln()]],
            theta_rows: vec![uniform.clone(), uniform.clone()],
            ref_rows: vec![uniform.clone(), uniform.clone()],
        };
        let cfg = GrpoConfig {
            group_size: 2,
            clip_epsilon: 0.2,
            kl_coefficient: 0.0,
            ..Default::default()
        };
        let (j, diag) = grpo_objective(&batch, &cfg).unwrap();
        // advantages are [-1, +1]; term 1 = min(-1, -1) = -1; term 2 =
        // min(1.5, 1.2) = 1.2; J = (-1 + 1.2)/2 = 0.1.
        assert!((diag.ratios[1][0] - 1.5).abs() < 1e-12);
        assert!(diag.clipped[1][0]);
        assert!((j - 0.1).abs() < 1e-12, "{j}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences_through_model() {
        let params = ModelParams::init(tiny_config(), 42).unwrap();
        let old = params.clone();
        let mut refp = ModelParams::init(tiny_config(), 43).unwrap();
        // Keep the reference close so KL gradients stay gentle.
        for (t, s) in refp.tensors_mut().into_iter().zip(old.named_tensors()) {
            let blend: Vec<f64> = t
                .data()
                .iter()
                .zip(s.1.data())
                .map(|(a, b)| 0.2 * a + 0.8 * b)
                .collect();
            *t = Tensor::new(t.shape().to_vec(), blend).unwrap();
        }
        let rollouts = vec![
            PromptRollouts {
                prompt: vec![1, 2],
                responses: vec![vec![3, 4], vec![5, 1], vec![0, 2]],
                rewards: vec![1.0, 0.0, 0.0],
            },
            PromptRollouts {
                prompt: vec![4, 0],
                responses: vec![vec![2, 2], vec![7, 3], vec![1, 6]],
                rewards: vec![0.0, 1.0, 1.0],
            },
        ];
        let cfg = GrpoConfig {
            group_size: 3,
            clip_epsilon: 0.5,
            kl_coefficient: 0.05,
            ..Default::default()
        };
        let (tape, ids, j, _) =
            build_step_tape(&params, &old, &refp, &rollouts, &cfg).unwrap();
        let grads = tape.backward(j).unwrap();
        let id_list = ids.list();
        let named = params.named_tensors();

        let mut rng = Rng::new(9);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 24 {
            let pi = rng.below(named.len());
            let numel = named[pi].1.numel();
            let ei = rng.below(numel);
            let g = grads
                .get(id_list[pi])
                .map(|t| t.data()[ei])
                .unwrap_or(0.0);
            let perturb = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[pi].data_mut()[ei] += delta;
                grpo_objective_at(&p, &old, &refp, &rollouts, &cfg).unwrap()
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-4);
            assert!(
                (g - fd).abs() / denom < 1e-4,
                "param {} [{ei}]: ad={g} fd={fd}",
                named[pi].0
            );
            checked += 1;
        }
    }

    #[test]
    fn sft_zero_lr_is_noop() {
        let mut params = ModelParams::init(tiny_config(), 1).unwrap();
        let before = params.clone();
        let batch = vec![(vec![1u32, 2], vec![3u32, 4])];
        sft_step(&mut params, &batch, 0.0).unwrap();
        for (a, b) in params.named_tensors().iter().zip(before.named_tensors()) {
            assert!(a.1.bits_eq(b.1), "{} changed", a.0);
        }
    }

    #[test]
    fn sft_loss_decreases_on_fixed_batch() {
        let mut params = ModelParams::init(tiny_config(), 2).unwrap();
        let batch = vec![
            (vec![1u32, 2, 3], vec![4u32, 5]),
            (vec![6u32, 7, 8], vec![0u32, 1]),
        ];
        let first = sft_step(&mut params, &batch, 0.05).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = sft_step(&mut params, &batch, 0.05).unwrap();
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let params = ModelParams::init(tiny_config(), 7).unwrap();
        let batch = vec![(vec![1u32, 2], vec![3u32, 4, 5])];
        // Build the loss tape once.
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let mut terms = Vec::new();
        let mut total = 0usize;
        for (prompt, target) in &batch {
            let mut seq = prompt.clone();
            seq.extend_from_slice(target);
            let handles =
                forward_on_tape(&mut tape, &params, &ids, &seq, &InterventionSpec::empty())
                    .unwrap();
            let picks: Vec<(usize, usize)> = target
                .iter()
                .enumerate()
                .map(|(j, &tok)| (prompt.len() + j - 1, tok as usize))
                .collect();
            total += picks.len();
            terms.push(tape.nll_sum(handles.log_probs, &picks).unwrap());
        }
        let sum = tape.add_n(&terms).unwrap();
        let loss = tape.scale(sum, 1.0 / total as f64).unwrap();
        let grads = tape.backward(loss).unwrap();
        let id_list = ids.list();
        let named = params.named_tensors();

        let loss_at = |p: &ModelParams| {
            let mut q = p.clone();
            // lr = 0 leaves params untouched and returns the loss.
            sft_step(&mut q, &batch, 0.0).unwrap()
        };
        let mut rng = Rng::new(31);
        let h = 1e-5;
        for _ in 0..24 {
            let pi = rng.below(named.len());
            let ei = rng.below(named[pi].1.numel());
            let g = grads.get(id_list[pi]).map(|t| t.data()[ei]).unwrap_or(0.0);
            let mut plus = params.clone();
            plus.tensors_mut()[pi].data_mut()[ei] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[pi].data_mut()[ei] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-3);
            assert!(
                (g - fd).abs() / denom < 1e-5,
                "param {} [{ei}]: ad={g} fd={fd}",
                named[pi].0
            );
        }
    }

    #[test]
    fn sft_rejects_empty_batch() {
        let mut params = ModelParams::init(tiny_config(), 1).unwrap();
        assert_eq!(sft_step(&mut params, &[], 0.1).unwrap_err(), CoreError::EmptyBatch);
    }

    #[test]
    fn grpo_step_equal_rewards_beta_zero_is_noop() {
        let mut params = ModelParams::init(tiny_config(), 3).unwrap();
        let refp = params.clone();
        let before = params.clone();
        let cfg = GrpoConfig {
            group_size: 4,
            kl_coefficient: 0.0,
            learning_rate: 0.1,
            sampler: SamplerConfig { max_new_tokens: 2, ..Default::default() },
            ..Default::default()
        };
        let stats = grpo_step(
            &mut params,
            &refp,
            &[vec![1, 2], vec![3, 4]],
            &cfg,
            &|_, _| Ok(1.0),
            99,
        )
        .unwrap();
        assert_eq!(stats.mean_reward, 1.0);
        for (a, b) in params.named_tensors().iter().zip(before.named_tensors()) {
            for (x, y) in a.1.data().iter().zip(b.1.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grpo_step_deterministic_given_seed() {
        let run = || {
            let mut params = ModelParams::init(tiny_config(), 4).unwrap();
            let refp = params.clone();
            let cfg = GrpoConfig {
                group_size: 3,
                sampler: SamplerConfig { max_new_tokens: 2, ..Default::default() },
                learning_rate: 0.05,
                ..Default::default()
            };
            let verifier = |_: &[u32], gen: &[u32]| Ok((gen[0] % 2 == 0) as u8 as f64);
            grpo_step(&mut params, &refp, &[vec![1, 2]], &cfg, &verifier, 5).unwrap();
            params
                .named_tensors()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn default_group_size_is_sixteen() {
        assert_eq!(GrpoConfig::default().group_size, 16);
        assert_eq!(GrpoConfig::default().reward_weight, 1.0);
    }

    #[test]
    fn manifest_requires_increasing_steps() {
        let mut m = TrainRunManifest {
            run_id: "r".into(),
            base_checkpoint: "base".into(),
            method: TrainMethod::Sft,
            checkpoints: vec![(100, "a".into()), (200, "b".into()), (300, "c".into())],
            config: vec![],
        };
        assert!(m.validate().is_ok());
        m.checkpoints.push((250, "d".into()));
        assert!(m.validate().is_err());
    }
}
