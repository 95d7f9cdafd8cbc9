//! Offline statistical estimation oracles over a finite model class:
//! maximum-likelihood density estimation and least-squares estimation, plus
//! exact trajectory-distribution divergences and the oracle rate function
//! that feeds the hyperparameter formulas.
//!
//! All divergences treat a model `M` under policy `pi` as the distribution
//! `M(pi)` of the full episode `(s_0, a_0, r_0, …, s_{H-1}, a_{H-1},
//! r_{H-1})`, reward bits included. Squared norms and inner products of these
//! distributions are computed by a forward recursion over paired state
//! chains, never by enumerating trajectories.

use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp, Trajectory};
use ndarray::{Array3, Array4};
use serde::Serialize;

/// A finite, dimension-compatible family of candidate tabular models.
/// `realizable_index`, when present, records which member generated the data
/// (test and experiment metadata only; estimators never read it).
#[derive(Debug, Clone)]
pub struct ModelClass {
    models: Vec<TabularMdp>,
    realizable_index: Option<usize>,
}

impl ModelClass {
    pub fn new(models: Vec<TabularMdp>, realizable_index: Option<usize>) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyData)?;
        for m in &models[1..] {
            first.check_compatible(m)?;
        }
        if let Some(i) = realizable_index {
            if i >= models.len() {
                return Err(Error::OutOfRange(format!("realizable index {i}")));
            }
        }
        Ok(Self { models, realizable_index })
    }

    pub fn models(&self) -> &[TabularMdp] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn realizable_index(&self) -> Option<usize> {
        self.realizable_index
    }

    pub fn get(&self, i: usize) -> &TabularMdp {
        &self.models[i]
    }
}

/// The guaranteed estimation-error curve `E(n, delta) = c_est * ln(|M|/delta) / n`,
/// strictly decreasing in both `n` and `delta`. `c_est` is exposed because the
/// guarantee is stated only up to constants.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OracleRate {
    pub c_est: f64,
}

impl Default for OracleRate {
    fn default() -> Self {
        Self { c_est: 1.0 }
    }
}

impl OracleRate {
    pub fn new(c_est: f64) -> Result<Self> {
        if c_est > 0.0 && c_est.is_finite() {
            Ok(Self { c_est })
        } else {
            Err(Error::Domain(format!("c_est {c_est} must be positive")))
        }
    }
}

/// Evaluates the oracle rate at a sample count and confidence level.
pub fn oracle_rate(rate: &OracleRate, class_size: usize, n: usize, delta: f64) -> Result<f64> {
    if n < 1 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    if class_size < 1 {
        return Err(Error::Domain("class size must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Domain(format!("delta {delta} outside (0, 1/2)")));
    }
    Ok(rate.c_est * (class_size as f64 / delta).ln() / n as f64)
}

/// Which score the estimator optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationCriterion {
    LogLikelihood,
    SquaredLoss,
}

/// Outcome of one oracle call. `scores` holds per-model log-likelihoods or
/// squared losses; entries may be `-inf` (serialized as JSON null) for models
/// assigning zero probability to an observed step.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub chosen_index: usize,
    pub criterion: EstimationCriterion,
    pub scores: Vec<f64>,
    pub n_samples: usize,
}

fn check_trajectories(class: &ModelClass, data: &[Trajectory]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let dims = class.get(0).dims();
    for traj in data {
        if traj.steps.len() != dims.horizon {
            return Err(Error::DimensionMismatch(format!(
                "trajectory length {} vs horizon {}",
                traj.steps.len(),
                dims.horizon
            )));
        }
        for step in &traj.steps {
            if step.state >= dims.num_states || step.action >= dims.num_actions {
                return Err(Error::OutOfRange(format!(
                    "step ({}, {}) out of range",
                    step.state, step.action
                )));
            }
        }
    }
    Ok(())
}

/// True when the observed reward is the high outcome `1/H`.
fn is_high_reward(reward: f64, horizon: usize) -> bool {
    reward > 0.5 / horizon as f64
}

/// Model-dependent log-probability of one trajectory (policy factors are
/// model-independent and omitted). `-inf` when the model assigns zero
/// probability to any observed transition or reward bit.
pub fn trajectory_log_likelihood(model: &TabularMdp, traj: &Trajectory) -> f64 {
    let h = model.horizon();
    let mut total = 0.0;
    for (layer, step) in traj.steps.iter().enumerate() {
        let p_high = model.mean_rewards()[(layer, step.state, step.action)] * h as f64;
        let p = if is_high_reward(step.reward, h) { p_high } else { 1.0 - p_high };
        total += p.ln();
        if layer + 1 < h {
            let next = traj.steps[layer + 1].state;
            total += model.transitions()[(layer, step.state, step.action, next)].ln();
        }
    }
    total
}

/// Per-model log tables so batch scoring is lookup-and-add.
struct LogTables {
    ln_p: Array4<f64>,
    ln_high: Array3<f64>,
    ln_low: Array3<f64>,
}

impl LogTables {
    fn build(model: &TabularMdp) -> Self {
        let h = model.horizon() as f64;
        Self {
            ln_p: model.transitions().mapv(f64::ln),
            ln_high: model.mean_rewards().mapv(|r| (r * h).ln()),
            ln_low: model.mean_rewards().mapv(|r| (1.0 - r * h).ln()),
        }
    }

    fn score(&self, traj: &Trajectory, horizon: usize) -> f64 {
        let mut total = 0.0;
        for (layer, step) in traj.steps.iter().enumerate() {
            total += if is_high_reward(step.reward, horizon) {
                self.ln_high[(layer, step.state, step.action)]
            } else {
                self.ln_low[(layer, step.state, step.action)]
            };
            if layer + 1 < horizon {
                total += self.ln_p[(layer, step.state, step.action, traj.steps[layer + 1].state)];
            }
        }
        total
    }
}

/// Maximum-likelihood estimation over the class. The chosen model maximizes
/// the summed log-likelihood of the batch; ties break toward the lowest
/// index; models assigning zero probability to any observed step score `-inf`.
pub fn mle_estimate(class: &ModelClass, data: &[Trajectory]) -> Result<EstimationReport> {
    check_trajectories(class, data)?;
    let horizon = class.get(0).horizon();
    let mut scores = Vec::with_capacity(class.len());
    for model in class.models() {
        let tables = LogTables::build(model);
        let mut total = 0.0;
        for traj in data {
            total += tables.score(traj, horizon);
            if total == f64::NEG_INFINITY {
                break;
            }
        }
        scores.push(total);
    }
    let chosen_index = argmax_lowest_tie(&scores);
    Ok(EstimationReport {
        chosen_index,
        criterion: EstimationCriterion::LogLikelihood,
        scores,
        n_samples: data.len(),
    })
}

fn argmax_lowest_tie(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn argmin_lowest_tie(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// Probability the model-policy pair assigns to one full trajectory,
/// policy factors included.
pub fn trajectory_probability(model: &TabularMdp, policy: &Policy, traj: &Trajectory) -> Result<f64> {
    model.check_policy(policy)?;
    let h = model.horizon();
    let mut p = 1.0;
    let mut state_ok = traj.steps.first().map(|s| s.state) == Some(model.start_state());
    if !state_ok {
        return Ok(0.0);
    }
    for (layer, step) in traj.steps.iter().enumerate() {
        p *= policy.probs()[(layer, step.state, step.action)];
        let p_high = model.mean_rewards()[(layer, step.state, step.action)] * h as f64;
        p *= if is_high_reward(step.reward, h) { p_high } else { 1.0 - p_high };
        if layer + 1 < h {
            p *= model.transitions()[(layer, step.state, step.action, traj.steps[layer + 1].state)];
            state_ok = true;
        }
        if p == 0.0 {
            return Ok(0.0);
        }
    }
    let _ = state_ok;
    Ok(p)
}

/// Forward recursion over the paired chain of two models sharing a policy.
/// `policy_power` is 1 when each policy factor appears once in the combined
/// step kernel (Bhattacharyya) and 2 when it appears squared (inner products).
fn paired_forward(
    a: &TabularMdp,
    b: &TabularMdp,
    policy: &Policy,
    policy_power: i32,
    reward_step: impl Fn(f64, f64) -> f64,
    trans_step: impl Fn(f64, f64) -> f64,
) -> Result<f64> {
    a.check_compatible(b)?;
    a.check_policy(policy)?;
    let (h, s_n, a_n) = (a.horizon(), a.num_states(), a.num_actions());
    let hf = h as f64;
    let pi = policy.probs();
    let mut w = ndarray::Array1::<f64>::zeros(s_n);
    w[a.start_state()] = 1.0;
    for layer in 0..h {
        let mut next = ndarray::Array1::<f64>::zeros(s_n);
        let mut last_layer_total = 0.0;
        for st in 0..s_n {
            if w[st] == 0.0 {
                continue;
            }
            for ac in 0..a_n {
                let pol = pi[(layer, st, ac)].powi(policy_power);
                if pol == 0.0 {
                    continue;
                }
                let pa = a.mean_rewards()[(layer, st, ac)] * hf;
                let pb = b.mean_rewards()[(layer, st, ac)] * hf;
                let g = w[st] * pol * reward_step(pa, pb);
                if g == 0.0 {
                    continue;
                }
                if layer + 1 < h {
                    for ns in 0..s_n {
                        let t = trans_step(
                            a.transitions()[(layer, st, ac, ns)],
                            b.transitions()[(layer, st, ac, ns)],
                        );
                        if t > 0.0 {
                            next[ns] += g * t;
                        }
                    }
                } else {
                    last_layer_total += g;
                }
            }
        }
        if layer + 1 < h {
            w = next;
        } else {
            return Ok(last_layer_total);
        }
    }
    unreachable!("horizon is positive");
}

/// `sum_z P_a(z) * P_b(z)` over full trajectory distributions.
pub fn distribution_inner_product(a: &TabularMdp, b: &TabularMdp, policy: &Policy) -> Result<f64> {
    paired_forward(
        a,
        b,
        policy,
        2,
        |pa, pb| pa * pb + (1.0 - pa) * (1.0 - pb),
        |x, y| x * y,
    )
}

/// Bhattacharyya coefficient `sum_z sqrt(P_a(z) * P_b(z))`.
pub fn bhattacharyya(a: &TabularMdp, b: &TabularMdp, policy: &Policy) -> Result<f64> {
    paired_forward(
        a,
        b,
        policy,
        1,
        |pa, pb| (pa * pb).sqrt() + ((1.0 - pa) * (1.0 - pb)).sqrt(),
        |x, y| (x * y).sqrt(),
    )
}

/// Exact squared Hellinger divergence between the trajectory distributions
/// `a(pi)` and `b(pi)`, reward bits included. Lies in [0, 2].
pub fn hellinger_sq_exact(a: &TabularMdp, b: &TabularMdp, policy: &Policy) -> Result<f64> {
    let bc = bhattacharyya(a, b, policy)?;
    Ok((2.0 - 2.0 * bc).max(0.0))
}

/// Exact squared L2 distance `sum_z (P_a(z) - P_b(z))^2`.
pub fn l2_sq_exact(a: &TabularMdp, b: &TabularMdp, policy: &Policy) -> Result<f64> {
    let aa = distribution_inner_product(a, a, policy)?;
    let bb = distribution_inner_product(b, b, policy)?;
    let ab = distribution_inner_product(a, b, policy)?;
    Ok((aa + bb - 2.0 * ab).max(0.0))
}

/// Least-squares estimation over the class: minimizes
/// `||P_M(pi)||^2 - (2/n) * sum_i P_M(z_i)`, the empirical squared-loss
/// criterion up to a model-independent constant. All trajectories must have
/// been executed under the single supplied policy.
pub fn lse_estimate(
    class: &ModelClass,
    data: &[Trajectory],
    policy: &Policy,
) -> Result<EstimationReport> {
    check_trajectories(class, data)?;
    let expected = data[0].policy_id;
    for traj in data {
        if traj.policy_id != expected {
            return Err(Error::MixedPolicies(expected, traj.policy_id));
        }
    }
    if policy.id() != expected {
        return Err(Error::MixedPolicies(expected, policy.id()));
    }
    let n = data.len() as f64;
    let mut scores = Vec::with_capacity(class.len());
    for model in class.models() {
        let norm_sq = distribution_inner_product(model, model, policy)?;
        let mut empirical = 0.0;
        for traj in data {
            empirical += trajectory_probability(model, policy, traj)?;
        }
        scores.push(norm_sq - 2.0 * empirical / n);
    }
    let chosen_index = argmin_lowest_tie(&scores);
    Ok(EstimationReport {
        chosen_index,
        criterion: EstimationCriterion::SquaredLoss,
        scores,
        n_samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{sample_trajectory, Dims};
    use ndarray::{Array2, Array3, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(h: usize, s: usize, a: usize) -> Dims {
        Dims::new(h, s, a, 0).unwrap()
    }

    fn deterministic_chain(h: usize, s: usize, reward: f64) -> TabularMdp {
        let d = dims(h, s, 1);
        let mut p = Array4::zeros((h, s, 1, s));
        for layer in 0..h {
            for st in 0..s {
                p[(layer, st, 0, (st + 1) % s)] = 1.0;
            }
        }
        TabularMdp::new(d, p, Array3::from_elem((h, s, 1), reward)).unwrap()
    }

    #[test]
    fn oracle_rate_form_and_monotonicity() {
        let rate = OracleRate::default();
        let v = oracle_rate(&rate, 1, 10, 0.49999).unwrap();
        assert!((v - (1.0_f64 / 0.49999).ln() / 10.0).abs() < 1e-15);
        // doubling n halves the value exactly
        let a = oracle_rate(&rate, 8, 512, 0.05).unwrap();
        let b = oracle_rate(&rate, 8, 1024, 0.05).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
        // arithmetic on the stated form
        let c = oracle_rate(&rate, 8, 1024, 0.05).unwrap();
        assert!((c - (8.0_f64 / 0.05).ln() / 1024.0).abs() < 1e-18);
        assert!((c - 4.956e-3).abs() < 5e-6);
        // strictly decreasing in delta
        assert!(oracle_rate(&rate, 8, 64, 0.01).unwrap() > oracle_rate(&rate, 8, 64, 0.02).unwrap());
        assert!(oracle_rate(&rate, 8, 0, 0.05).is_err());
        assert!(oracle_rate(&rate, 8, 64, 0.5).is_err());
        assert!(oracle_rate(&rate, 0, 64, 0.05).is_err());
    }

    #[test]
    fn singleton_class_always_chosen() {
        let model = deterministic_chain(2, 2, 0.0);
        let class = ModelClass::new(vec![model.clone()], Some(0)).unwrap();
        let policy = Policy::uniform(model.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = vec![sample_trajectory(&model, &policy, &mut rng).unwrap()];
        assert_eq!(mle_estimate(&class, &data).unwrap().chosen_index, 0);
        assert_eq!(lse_estimate(&class, &data, &policy).unwrap().chosen_index, 0);
    }

    #[test]
    fn zero_likelihood_model_is_eliminated() {
        let truth = deterministic_chain(2, 2, 0.0);
        // Model 1 moves the opposite way: probability 0 for observed jumps.
        let d = dims(2, 2, 1);
        let mut p = Array4::zeros((2, 2, 1, 2));
        for layer in 0..2 {
            for st in 0..2 {
                p[(layer, st, 0, st)] = 1.0;
            }
        }
        let wrong = TabularMdp::new(d, p, Array3::zeros((2, 2, 1))).unwrap();
        let class = ModelClass::new(vec![truth.clone(), wrong], Some(0)).unwrap();
        let policy = Policy::uniform(truth.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = vec![sample_trajectory(&truth, &policy, &mut rng).unwrap()];
        let report = mle_estimate(&class, &data).unwrap();
        assert_eq!(report.chosen_index, 0);
        assert_eq!(report.scores[1], f64::NEG_INFINITY);
    }

    #[test]
    fn empty_data_is_rejected() {
        let model = deterministic_chain(2, 2, 0.0);
        let class = ModelClass::new(vec![model.clone()], None).unwrap();
        assert!(matches!(mle_estimate(&class, &[]), Err(Error::EmptyData)));
        assert!(matches!(
            lse_estimate(&class, &[], &Policy::uniform(model.dims())),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn mixed_policy_batches_are_rejected() {
        let model = deterministic_chain(2, 2, 0.0);
        let class = ModelClass::new(vec![model.clone()], None).unwrap();
        let p0 = Policy::uniform(model.dims()).with_id(0);
        let p1 = Policy::uniform(model.dims()).with_id(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = vec![
            sample_trajectory(&model, &p0, &mut rng).unwrap(),
            sample_trajectory(&model, &p1, &mut rng).unwrap(),
        ];
        assert!(matches!(
            lse_estimate(&class, &data, &p0),
            Err(Error::MixedPolicies(0, 1))
        ));
    }

    #[test]
    fn lse_point_mass_scores_minus_one() {
        // Deterministic model, policy, and reward channel: one possible
        // trajectory, so ||P||^2 = 1 and each empirical term is 1.
        let truth = deterministic_chain(3, 2, 1.0 / 3.0);
        let policy = Policy::deterministic(truth.dims(), &Array2::zeros((3, 2))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<_> = (0..5)
            .map(|_| sample_trajectory(&truth, &policy, &mut rng).unwrap())
            .collect();
        let other = deterministic_chain(3, 2, 0.0);
        let class = ModelClass::new(vec![truth, other], Some(0)).unwrap();
        let report = lse_estimate(&class, &data, &policy).unwrap();
        assert_eq!(report.chosen_index, 0);
        assert!((report.scores[0] + 1.0).abs() < 1e-12);
        assert!(report.scores[1] > report.scores[0]);
    }

    #[test]
    fn hellinger_same_model_is_zero_and_disjoint_is_two() {
        let a = deterministic_chain(2, 2, 0.0);
        let b = deterministic_chain(2, 2, 0.5); // H*r = 1: reward bit always high
        let policy = Policy::uniform(a.dims());
        assert!(hellinger_sq_exact(&a, &a, &policy).unwrap().abs() < 1e-12);
        let d = hellinger_sq_exact(&a, &b, &policy).unwrap();
        assert!((d - 2.0).abs() < 1e-12, "disjoint supports: {d}");
    }

    #[test]
    fn l2_trivial_cases() {
        let a = deterministic_chain(2, 2, 0.0);
        let policy = Policy::deterministic(a.dims(), &Array2::zeros((2, 2))).unwrap();
        assert!(l2_sq_exact(&a, &a, &policy).unwrap().abs() < 1e-12);
        // Distinct deterministic single trajectories: ||Pa - Pb||^2 = 2.
        let b = deterministic_chain(2, 2, 0.5);
        let d = l2_sq_exact(&a, &b, &policy).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_to_json() {
        let report = EstimationReport {
            chosen_index: 0,
            criterion: EstimationCriterion::LogLikelihood,
            scores: vec![-1.5, f64::NEG_INFINITY],
            n_samples: 3,
        };
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.contains("\"chosen_index\":0"));
        assert!(text.contains("null")); // -inf scores serialize as null
    }
}
