//! pass@k / success@k metrics and the sampling evaluation harness.
//!
//! pass@k is the unbiased estimator 1 - C(n-c, k) / C(n, k), computed with a
//! stable product so n up to 64 needs no big integers. success@k is the
//! order-sensitive indicator that a correct answer appears within the first
//! k sequential generations.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::model::{sample_with_rng, InterventionSpec, ModelParams, SamplerConfig};
use crate::rng::{hash64, Rng};
use crate::Result;

/// Ordered correctness outcomes for one problem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProblemResults {
    pub id: String,
    /// Correctness per sample, in generation order.
    pub outcomes: Vec<bool>,
}

impl ProblemResults {
    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn c(&self) -> usize {
        self.outcomes.iter().filter(|&&v| v).count()
    }
}

/// Unbiased pass@k for one problem with n samples, c of them correct.
///
/// Returns exactly 1.0 when n - c < k (every k-subset must contain a correct
/// sample) and exactly 0.0 when c == 0.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(CoreError::MetricDomain { detail: format!("c {c} > n {n}") });
    }
    if k == 0 || k > n {
        return Err(CoreError::MetricDomain { detail: format!("k {k} outside 1..={n}") });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if c == 0 {
        return Ok(0.0);
    }
    // 1 - prod_{i=n-c+1..n} (1 - k/i)
    let mut prod = 1.0;
    for i in (n - c + 1)..=n {
        prod *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - prod)
}

/// Order-sensitive success@k for one problem: true iff any of the first k
/// outcomes is correct.
pub fn success_at_k(results: &ProblemResults, k: usize) -> Result<bool> {
    if k == 0 || k > results.n() {
        return Err(CoreError::MetricDomain {
            detail: format!("k {k} outside 1..={}", results.n()),
        });
    }
    Ok(results.outcomes[..k].iter().any(|&v| v))
}

/// Verifier: (prompt, generated) -> correctness.
pub type Verifier = Box<dyn Fn(&[u32], &[u32]) -> Result<bool>>;

/// One evaluation problem.
pub struct EvalProblem {
    pub id: String,
    pub prompt: Vec<u32>,
    pub verifier: Verifier,
}

/// Evaluation results: per-k metric means plus the full outcome matrix so
/// every number is recomputable.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Samples generated per problem.
    pub n: usize,
    /// k -> mean pass@k over problems, for every k in 1..=n.
    pub pass_at_k: BTreeMap<usize, f64>,
    /// k -> mean success@k over problems, for every k in 1..=n.
    pub success_at_k: BTreeMap<usize, f64>,
    pub problems: Vec<ProblemResults>,
    pub sampler: SamplerConfig,
    /// Provenance fields, filled by the caller that owns the artifacts.
    pub checkpoint: String,
    pub intervention_hash: String,
}

impl EvalReport {
    /// Outcome matrix as 0/1 rows, problem order preserved.
    pub fn outcome_matrix(&self) -> Vec<Vec<u8>> {
        self.problems
            .iter()
            .map(|p| p.outcomes.iter().map(|&v| v as u8).collect())
            .collect()
    }

    /// Mean per-sample correctness over all problems and samples.
    pub fn mean_correctness(&self) -> f64 {
        let total: usize = self.problems.iter().map(|p| p.n()).sum();
        let correct: usize = self.problems.iter().map(|p| p.c()).sum();
        correct as f64 / total as f64
    }
}

/// Aggregate per-problem outcomes into an [`EvalReport`].
pub fn report_from_outcomes(
    problems: Vec<ProblemResults>,
    n: usize,
    sampler: SamplerConfig,
) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(CoreError::Invalid { detail: "no problems to report".into() });
    }
    for p in &problems {
        if p.n() != n {
            return Err(CoreError::MetricDomain {
                detail: format!("problem {} has {} outcomes, expected {n}", p.id, p.n()),
            });
        }
    }
    let count = problems.len() as f64;
    let mut pass_map = BTreeMap::new();
    let mut success_map = BTreeMap::new();
    for k in 1..=n {
        let mut pass_sum = 0.0;
        let mut succ_sum = 0.0;
        for p in &problems {
            pass_sum += pass_at_k(p.n(), p.c(), k)?;
            succ_sum += if success_at_k(p, k)? { 1.0 } else { 0.0 };
        }
        pass_map.insert(k, pass_sum / count);
        success_map.insert(k, succ_sum / count);
    }
    Ok(EvalReport {
        n,
        pass_at_k: pass_map,
        success_at_k: success_map,
        problems,
        sampler,
        checkpoint: String::new(),
        intervention_hash: String::new(),
    })
}

/// Generate n samples per problem under an intervention spec, verify each
/// in generation order, and aggregate pass@k / success@k for every k <= n.
///
/// Sampling streams are derived from (sampler seed, problem id, sample
/// index), so results are independent of evaluation order.
pub fn evaluate(
    params: &ModelParams,
    problems: &[EvalProblem],
    cfg: &SamplerConfig,
    spec: &InterventionSpec,
    n_samples: usize,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(CoreError::MetricDomain { detail: "n_samples must be >= 1".into() });
    }
    if problems.is_empty() {
        return Err(CoreError::Invalid { detail: "no problems to evaluate".into() });
    }
    cfg.validate()?;
    let mut results = Vec::with_capacity(problems.len());
    for problem in problems {
        let stream = cfg.seed ^ hash64(problem.id.as_bytes());
        let mut outcomes = Vec::with_capacity(n_samples);
        for j in 0..n_samples {
            let mut rng = Rng::derive(stream, j as u64);
            let generated = sample_with_rng(params, &problem.prompt, cfg, spec, &mut rng)?;
            let ok = (problem.verifier)(&problem.prompt, &generated).map_err(|e| {
                CoreError::Invalid {
                    detail: format!("verifier failed for problem {}: {e}", problem.id),
                }
            })?;
            outcomes.push(ok);
        }
        results.push(ProblemResults { id: problem.id.clone(), outcomes });
    }
    report_from_outcomes(results, n_samples, cfg.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, PositionalKind};

    /// Oracle: exact pass@k by enumerating every k-subset of n samples with
    /// c correct ones, counting subsets containing at least one correct.
    fn pass_at_k_enumerated(n: usize, c: usize, k: usize) -> f64 {
        // Iterate over all C(n, k) index subsets via bitmasks (n <= 16).
        assert!(n <= 16);
        let mut total = 0u64;
        let mut hit = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            total += 1;
            // Samples 0..c are the correct ones; position is irrelevant
            // for the unordered estimator.
            if (mask & ((1 << c) - 1)) != 0 {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn pass_at_k_trivial_cases() {
        assert_eq!(pass_at_k(4, 4, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(4, 0, 4).unwrap(), 0.0);
    }

    #[test]
    fn pass_at_k_matches_subset_enumeration_case() {
        // n=5, c=2, k=2: 3 of the C(5,2)=10 subsets contain no correct
        // sample, so the estimator must equal 0.7.
        let oracle = pass_at_k_enumerated(5, 2, 2);
        assert!((oracle - 0.7).abs() < 1e-15);
        assert!((pass_at_k(5, 2, 2).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn pass_at_k_matches_enumeration_full_grid() {
        for n in 1..=10 {
            for c in 0..=n {
                for k in 1..=n {
                    let got = pass_at_k(n, c, k).unwrap();
                    let want = pass_at_k_enumerated(n, c, k);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "n={n} c={c} k={k}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn pass_at_k_monotone_in_k_and_c() {
        for n in 1..=10 {
            for c in 0..=n {
                for k in 1..n {
                    assert!(pass_at_k(n, c, k + 1).unwrap() >= pass_at_k(n, c, k).unwrap());
                }
            }
            for k in 1..=n {
                for c in 0..n {
                    assert!(pass_at_k(n, c + 1, k).unwrap() >= pass_at_k(n, c, k).unwrap());
                }
            }
            for c in 0..=n {
                let full = pass_at_k(n, c, n).unwrap();
                assert_eq!(full == 1.0, c >= 1);
            }
        }
    }

    #[test]
    fn pass_at_k_domain_errors() {
        assert!(pass_at_k(4, 5, 1).is_err());
        assert!(pass_at_k(4, 2, 5).is_err());
        assert!(pass_at_k(4, 2, 0).is_err());
    }

    #[test]
    fn success_at_k_prefix_scan() {
        let r = ProblemResults { id: "p".into(), outcomes: vec![false, false, true, false] };
        assert!(!success_at_k(&r, 2).unwrap());
        assert!(success_at_k(&r, 3).unwrap());
        let zeros = ProblemResults { id: "z".into(), outcomes: vec![false; 4] };
        for k in 1..=4 {
            assert!(!success_at_k(&zeros, k).unwrap());
        }
        assert!(success_at_k(&r, 5).is_err());
    }

    #[test]
    fn success_at_k_mean_over_problems() {
        let problems = vec![
            ProblemResults { id: "a".into(), outcomes: vec![true, false] },
            ProblemResults { id: "b".into(), outcomes: vec![false, false] },
        ];
        let report =
            report_from_outcomes(problems, 2, SamplerConfig::default()).unwrap();
        assert!((report.success_at_k[&1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn success_monotone_and_terminal_identity() {
        let mut rng = crate::rng::Rng::new(17);
        for _ in 0..10_000 {
            let n = 1 + rng.below(10);
            let outcomes: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
            let r = ProblemResults { id: "r".into(), outcomes };
            let mut prev = false;
            for k in 1..=n {
                let s = success_at_k(&r, k).unwrap();
                assert!(s >= prev, "success@k decreased");
                prev = s;
            }
            let c = r.c();
            assert_eq!(success_at_k(&r, n).unwrap(), c >= 1);
            assert_eq!(c >= 1, pass_at_k(n, c, n).unwrap() > 0.0);
        }
    }

    #[test]
    fn permutation_averaged_success_equals_pass() {
        // For exchangeable orderings, E[success@k] over all permutations of
        // the outcome vector equals pass@k.
        fn permutations(items: &mut Vec<bool>, k: usize, out: &mut Vec<Vec<bool>>) {
            if k == items.len() {
                out.push(items.clone());
                return;
            }
            for i in k..items.len() {
                items.swap(k, i);
                permutations(items, k + 1, out);
                items.swap(k, i);
            }
        }
        for n in 1..=7 {
            for c in 0..=n {
                let mut base: Vec<bool> = (0..n).map(|i| i < c).collect();
                let mut perms = Vec::new();
                permutations(&mut base, 0, &mut perms);
                for k in 1..=n {
                    let mean: f64 = perms
                        .iter()
                        .map(|p| {
                            let r = ProblemResults { id: "x".into(), outcomes: p.clone() };
                            if success_at_k(&r, k).unwrap() { 1.0 } else { 0.0 }
                        })
                        .sum::<f64>()
                        / perms.len() as f64;
                    let pk = pass_at_k(n, c, k).unwrap();
                    assert!(
                        (mean - pk).abs() < 0.02,
                        "n={n} c={c} k={k}: {mean} vs {pk}"
                    );
                }
            }
        }
    }

    #[test]
    fn bernoulli_monte_carlo_unbiasedness() {
        // Synthetic Bernoulli(p=0.3) "model": mean pass@3 over trials with
        // n=10 samples each must match 1-(1-p)^3 within 3 sigma.
        let p = 0.3;
        let k = 3;
        let n = 10;
        let trials = 10_000;
        let mut rng = crate::rng::Rng::new(2024);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let c = (0..n).filter(|_| rng.next_f64() < p).count();
            let v = pass_at_k(n, c, k).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let se = (var / trials as f64).sqrt();
        let expected = 1.0 - (1.0 - p) * (1.0 - p) * (1.0 - p);
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} vs {expected} (3se={})",
            3.0 * se
        );
    }

    fn fixed_model() -> ModelParams {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_head: 4,
            d_mlp: 4,
            vocab_size: 6,
            max_seq_len: 8,
            pos_kind: PositionalKind::LearnedAbsolute,
        };
        ModelParams::init(config, 5).unwrap()
    }

    #[test]
    fn evaluate_constant_true_verifier() {
        let params = fixed_model();
        let problems: Vec<EvalProblem> = (0..3)
            .map(|i| EvalProblem {
                id: format!("p{i}"),
                prompt: vec![1, 2],
                verifier: Box::new(|_, _| Ok(true)),
            })
            .collect();
        let cfg = SamplerConfig { max_new_tokens: 2, seed: 3, ..Default::default() };
        let report =
            evaluate(&params, &problems, &cfg, &InterventionSpec::empty(), 4).unwrap();
        for k in 1..=4 {
            assert_eq!(report.pass_at_k[&k], 1.0);
            assert_eq!(report.success_at_k[&k], 1.0);
        }
    }

    #[test]
    fn evaluate_unit_scale_matches_empty_spec() {
        let params = fixed_model();
        let problems = |seed_tag: &str| -> Vec<EvalProblem> {
            vec![EvalProblem {
                id: format!("q-{seed_tag}"),
                prompt: vec![0, 3],
                verifier: Box::new(|_, gen: &[u32]| Ok(gen[0] % 2 == 0)),
            }]
        };
        let cfg = SamplerConfig { max_new_tokens: 3, seed: 11, ..Default::default() };
        let empty =
            evaluate(&params, &problems("x"), &cfg, &InterventionSpec::empty(), 6).unwrap();
        let scaled = evaluate(
            &params,
            &problems("x"),
            &cfg,
            &InterventionSpec::scale([(0, 0)], 1.0),
            6,
        )
        .unwrap();
        assert_eq!(empty.pass_at_k, scaled.pass_at_k);
        assert_eq!(empty.success_at_k, scaled.success_at_k);
        assert_eq!(empty.outcome_matrix(), scaled.outcome_matrix());
    }

    #[test]
    fn evaluate_pass_at_1_is_mean_correctness() {
        let params = fixed_model();
        let problems: Vec<EvalProblem> = (0..4)
            .map(|i| EvalProblem {
                id: format!("m{i}"),
                prompt: vec![2, 4],
                verifier: Box::new(|_, gen: &[u32]| Ok(gen[0] < 3)),
            })
            .collect();
        let cfg = SamplerConfig { max_new_tokens: 1, seed: 7, ..Default::default() };
        let report =
            evaluate(&params, &problems, &cfg, &InterventionSpec::empty(), 8).unwrap();
        assert!((report.pass_at_k[&1] - report.mean_correctness()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_surfaces_verifier_failure_with_id() {
        let params = fixed_model();
        let problems = vec![EvalProblem {
            id: "broken-7".into(),
            prompt: vec![1],
            verifier: Box::new(|_, _| {
                Err(CoreError::Invalid { detail: "bad verdict".into() })
            }),
        }];
        let cfg = SamplerConfig { max_new_tokens: 1, ..Default::default() };
        let err = evaluate(&params, &problems, &cfg, &InterventionSpec::empty(), 1).unwrap_err();
        match err {
            CoreError::Invalid { detail } => assert!(detail.contains("broken-7"), "{detail}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
