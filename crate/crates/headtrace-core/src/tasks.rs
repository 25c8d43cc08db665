//! Built-in synthetic tasks with programmatic verifiers.
//!
//! All tasks share one integer vocabulary so a model trained on one task can
//! be fine-tuned on another: value tokens 0..16, a copy/sort separator, and
//! an equals marker for modular arithmetic.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use crate::attribution::PromptPair;
use crate::error::CoreError;
use crate::evalmetrics::EvalProblem;
use crate::model::{ModelConfig, PositionalKind};
use crate::rng::Rng;
use crate::Result;

/// Number of value tokens.
pub const N_VALUES: usize = 16;
/// Separator token for copy and sort prompts.
pub const SEP: u32 = 16;
/// Equals token for modular addition prompts.
pub const EQ: u32 = 17;
/// Shared vocabulary size.
pub const VOCAB_SIZE: usize = 18;

/// A synthetic task: prompt generation, target continuation, verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Repeat `len` value tokens after the separator.
    Copy { len: usize },
    /// a + b mod `modulus`, answered with a single token.
    ModAdd { modulus: usize },
    /// Emit `len` value tokens in nondecreasing order after the separator.
    Sort { len: usize },
}

impl Task {
    /// Parse a task id: `copy`, `modadd`, `sort`.
    pub fn parse(id: &str) -> Option<Task> {
        match id {
            "copy" => Some(Task::Copy { len: 4 }),
            "modadd" => Some(Task::ModAdd { modulus: N_VALUES }),
            "sort" => Some(Task::Sort { len: 4 }),
            _ => None,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Task::Copy { .. } => "copy",
            Task::ModAdd { .. } => "modadd",
            Task::Sort { .. } => "sort",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Task::Copy { len } | Task::Sort { len } => {
                if len == 0 {
                    return Err(CoreError::Invalid { detail: "task length must be >= 1".into() });
                }
            }
            Task::ModAdd { modulus } => {
                if modulus < 2 || modulus > N_VALUES {
                    return Err(CoreError::Invalid {
                        detail: format!("modulus {modulus} must be in 2..={N_VALUES}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Tokens the model must generate to answer a prompt.
    pub fn answer_len(&self) -> usize {
        match *self {
            Task::Copy { len } | Task::Sort { len } => len,
            Task::ModAdd { .. } => 1,
        }
    }

    pub fn prompt_len(&self) -> usize {
        match *self {
            Task::Copy { len } | Task::Sort { len } => len + 1,
            Task::ModAdd { .. } => 3,
        }
    }

    /// Draw a (prompt, expected answer) instance.
    pub fn sample_instance(&self, rng: &mut Rng) -> (Vec<u32>, Vec<u32>) {
        match *self {
            Task::Copy { len } => {
                let values: Vec<u32> = (0..len).map(|_| rng.below(N_VALUES) as u32).collect();
                let mut prompt = values.clone();
                prompt.push(SEP);
                (prompt, values)
            }
            Task::ModAdd { modulus } => {
                let a = rng.below(modulus) as u32;
                let b = rng.below(modulus) as u32;
                (alloc::vec![a, b, EQ], alloc::vec![(a + b) % modulus as u32])
            }
            Task::Sort { len } => {
                let values: Vec<u32> = (0..len).map(|_| rng.below(N_VALUES) as u32).collect();
                let mut prompt = values.clone();
                prompt.push(SEP);
                let mut sorted = values;
                sorted.sort_unstable();
                (prompt, sorted)
            }
        }
    }

    /// Expected answer recomputed from a prompt.
    pub fn expected_answer(&self, prompt: &[u32]) -> Result<Vec<u32>> {
        let bad = || CoreError::Invalid {
            detail: format!("prompt does not match task {}", self.id()),
        };
        match *self {
            Task::Copy { len } => {
                if prompt.len() != len + 1 || prompt[len] != SEP {
                    return Err(bad());
                }
                Ok(prompt[..len].to_vec())
            }
            Task::ModAdd { modulus } => {
                if prompt.len() != 3 || prompt[2] != EQ {
                    return Err(bad());
                }
                let (a, b) = (prompt[0] as usize, prompt[1] as usize);
                if a >= modulus || b >= modulus {
                    return Err(bad());
                }
                Ok(alloc::vec![((a + b) % modulus) as u32])
            }
            Task::Sort { len } => {
                if prompt.len() != len + 1 || prompt[len] != SEP {
                    return Err(bad());
                }
                let mut sorted = prompt[..len].to_vec();
                sorted.sort_unstable();
                Ok(sorted)
            }
        }
    }

    /// Pure verifier: the generated prefix must equal the expected answer.
    pub fn verify(&self, prompt: &[u32], generated: &[u32]) -> Result<bool> {
        let expected = self.expected_answer(prompt)?;
        if generated.len() < expected.len() {
            return Ok(false);
        }
        Ok(generated[..expected.len()] == expected[..])
    }

    /// Boxed verifier closure for the evaluation harness.
    pub fn verifier(&self) -> Box<dyn Fn(&[u32], &[u32]) -> Result<bool>> {
        let task = *self;
        Box::new(move |prompt, generated| task.verify(prompt, generated))
    }

    /// Reward function: 1.0 for a verified answer, else 0.0.
    pub fn reward(&self, prompt: &[u32], generated: &[u32]) -> Result<f64> {
        Ok(if self.verify(prompt, generated)? { 1.0 } else { 0.0 })
    }

    /// SFT batch of (prompt, target) examples.
    pub fn sft_batch(&self, count: usize, rng: &mut Rng) -> Vec<(Vec<u32>, Vec<u32>)> {
        (0..count).map(|_| self.sample_instance(rng)).collect()
    }

    /// Evaluation problems with stable ids.
    pub fn eval_problems(&self, count: usize, seed: u64) -> Vec<EvalProblem> {
        let mut rng = Rng::new(seed);
        (0..count)
            .map(|i| {
                let (prompt, _) = self.sample_instance(&mut rng);
                EvalProblem {
                    id: format!("{}-{i:04}", self.id()),
                    prompt,
                    verifier: self.verifier(),
                }
            })
            .collect()
    }

    /// Clean/corrupted prompt pairs: two independent instances of the same
    /// task, so both sides have the same shape and length.
    pub fn make_pairs(&self, count: usize, seed: u64) -> Result<Vec<PromptPair>> {
        let mut rng = Rng::new(seed);
        let mut pairs = Vec::with_capacity(count);
        for i in 0..count {
            let (clean, _) = self.sample_instance(&mut rng);
            let mut corrupted = self.sample_instance(&mut rng).0;
            // Avoid degenerate identical pairs.
            let mut guard = 0;
            while corrupted == clean && guard < 16 {
                corrupted = self.sample_instance(&mut rng).0;
                guard += 1;
            }
            pairs.push(PromptPair::new(clean, corrupted, format!("{}-{i:04}", self.id()))?);
        }
        Ok(pairs)
    }
}

/// The default desk-scale model sized for these tasks.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        d_mlp: 128,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 24,
        pos_kind: PositionalKind::LearnedAbsolute,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_known_ids() {
        assert_eq!(Task::parse("copy"), Some(Task::Copy { len: 4 }));
        assert_eq!(Task::parse("modadd"), Some(Task::ModAdd { modulus: 16 }));
        assert_eq!(Task::parse("sort"), Some(Task::Sort { len: 4 }));
        assert_eq!(Task::parse("nope"), None);
    }

    #[test]
    fn instances_verify_against_own_answers() {
        let mut rng = Rng::new(1);
        for task in [Task::Copy { len: 4 }, Task::ModAdd { modulus: 16 }, Task::Sort { len: 5 }] {
            for _ in 0..50 {
                let (prompt, answer) = task.sample_instance(&mut rng);
                assert_eq!(prompt.len(), task.prompt_len());
                assert_eq!(answer.len(), task.answer_len());
                assert!(task.verify(&prompt, &answer).unwrap());
                assert_eq!(task.expected_answer(&prompt).unwrap(), answer);
                // A wrong first token fails.
                let mut wrong = answer.clone();
                wrong[0] = (wrong[0] + 1) % N_VALUES as u32;
                assert!(!task.verify(&prompt, &wrong).unwrap());
                // Extra trailing tokens are ignored.
                let mut padded = answer.clone();
                padded.push(0);
                assert!(task.verify(&prompt, &padded).unwrap());
            }
        }
    }

    #[test]
    fn modadd_wraps() {
        let task = Task::ModAdd { modulus: 16 };
        assert_eq!(task.expected_answer(&[15, 3, EQ]).unwrap(), [2]);
        assert_eq!(task.expected_answer(&[0, 0, EQ]).unwrap(), [0]);
        assert!(task.expected_answer(&[1, 2, SEP]).is_err());
    }

    #[test]
    fn sort_orders_values() {
        let task = Task::Sort { len: 4 };
        assert_eq!(task.expected_answer(&[9, 2, 9, 0, SEP]).unwrap(), [0, 2, 9, 9]);
    }

    #[test]
    fn pairs_are_aligned_and_distinct() {
        for task in [Task::Copy { len: 4 }, Task::ModAdd { modulus: 16 }] {
            let pairs = task.make_pairs(25, 7).unwrap();
            assert_eq!(pairs.len(), 25);
            for p in &pairs {
                assert_eq!(p.clean.len(), p.corrupted.len());
                assert_ne!(p.clean, p.corrupted);
            }
        }
    }

    #[test]
    fn default_config_fits_tasks() {
        let cfg = default_model_config();
        cfg.validate().unwrap();
        assert_eq!(cfg.vocab_size, VOCAB_SIZE);
        assert!(Task::Copy { len: 4 }.prompt_len() + 4 <= cfg.max_seq_len);
    }
}
