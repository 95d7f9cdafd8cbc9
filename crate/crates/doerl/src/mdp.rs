//! Tabular MDP representation, trajectory simulation, and exact dynamic
//! programming: occupancy measures, values, greedy planning, and regret
//! accounting against a ground-truth model.
//!
//! Layers are 0-indexed: an episode visits `(s_0, a_0, r_0), …, (s_{H-1},
//! a_{H-1}, r_{H-1})`, and `transitions[h]` carries flow from layer `h` to
//! layer `h+1`. The table at `h = H-1` is allocated for shape and
//! serialization consistency but is unreachable by any H-step episode, so no
//! dynamic program or likelihood ever reads it.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tolerance for simplex checks on constructed objects.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Row sums farther than this from 1 are rejected rather than renormalized.
const ROW_REPAIR_TOL: f64 = 1e-6;

/// Default cap on `(S*A)^H` for [`enumerate_trajectories`].
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Shared shape data for a tabular environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub start_state: usize,
}

impl Dims {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, start_state: usize) -> Result<Self> {
        if horizon == 0 || num_states == 0 || num_actions == 0 {
            return Err(Error::OutOfRange("horizon, states and actions must be positive".into()));
        }
        if start_state >= num_states {
            return Err(Error::OutOfRange(format!(
                "start state {start_state} out of range for {num_states} states"
            )));
        }
        Ok(Self { horizon, num_states, num_actions, start_state })
    }

    fn require_eq(&self, other: &Dims, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

/// Observed per-step rewards are `(1/H) * Bernoulli(H * r[h][s][a])`.
///
/// The choice of noise keeps per-step likelihoods discrete so maximum
/// likelihood is exact and tiny trajectory spaces stay finite; it is one
/// admissible instantiation of a zero-mean noise around the mean reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RewardNoiseModel {
    #[default]
    BernoulliScaled,
}

impl RewardNoiseModel {
    /// Probability of emitting the high reward `1/H` at mean reward `r`.
    pub fn high_probability(&self, mean_reward: f64, horizon: usize) -> f64 {
        mean_reward * horizon as f64
    }

    /// Draw an observed reward in `{0, 1/H}`.
    pub fn sample<R: Rng + ?Sized>(&self, mean_reward: f64, horizon: usize, rng: &mut R) -> f64 {
        let p = self.high_probability(mean_reward, horizon);
        if rng.random::<f64>() < p {
            1.0 / horizon as f64
        } else {
            0.0
        }
    }
}

/// A randomized non-stationary policy: one action distribution per
/// (layer, state).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: Array3<f64>, // (H, S, A)
    id: u64,
}

impl Policy {
    /// Validates shape and rows; rejects negative entries, repairs float dust
    /// on row sums, rejects rows whose sum is not within 1e-6 of 1.
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        let mut probs = probs;
        normalize_rows3(&mut probs, "policy")?;
        Ok(Self { probs, id: 0 })
    }

    /// Random strictly-interior policy (rows from jittered exponential draws).
    pub fn random_interior<R: Rng + ?Sized>(dims: &Dims, rng: &mut R) -> Self {
        let mut probs = Array3::zeros((dims.horizon, dims.num_states, dims.num_actions));
        for layer in 0..dims.horizon {
            for st in 0..dims.num_states {
                let mut total = 0.0;
                for ac in 0..dims.num_actions {
                    let w = -(1.0 - rng.random::<f64>()).ln() + 1e-3;
                    probs[(layer, st, ac)] = w;
                    total += w;
                }
                for ac in 0..dims.num_actions {
                    probs[(layer, st, ac)] /= total;
                }
            }
        }
        Self { probs, id: 0 }
    }

    /// Constructs without simplex validation. Rows need not be normalized;
    /// objective evaluation treats the table entrywise (used by derivative
    /// checks and solver internals).
    pub fn from_probs_unchecked(probs: Array3<f64>) -> Self {
        Self { probs, id: 0 }
    }

    pub fn uniform(dims: &Dims) -> Self {
        let a = dims.num_actions as f64;
        Self {
            probs: Array3::from_elem((dims.horizon, dims.num_states, dims.num_actions), 1.0 / a),
            id: 0,
        }
    }

    /// Deterministic policy from a per-(layer, state) action choice.
    pub fn deterministic(dims: &Dims, choice: &Array2<usize>) -> Result<Self> {
        if choice.dim() != (dims.horizon, dims.num_states) {
            return Err(Error::DimensionMismatch("action choice table".into()));
        }
        let mut probs = Array3::zeros((dims.horizon, dims.num_states, dims.num_actions));
        for ((h, s), &a) in choice.indexed_iter() {
            if a >= dims.num_actions {
                return Err(Error::OutOfRange(format!("action {a} at ({h},{s})")));
            }
            probs[(h, s, a)] = 1.0;
        }
        Ok(Self { probs, id: 0 })
    }

    /// Entrywise blend `lambda * self + (1 - lambda) * other`.
    pub fn blend(&self, other: &Policy, lambda: f64) -> Result<Policy> {
        if self.probs.dim() != other.probs.dim() {
            return Err(Error::DimensionMismatch("policy blend".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::OutOfRange(format!("lambda {lambda} outside [0,1]")));
        }
        Ok(Policy::from_probs_unchecked(&self.probs * lambda + &other.probs * (1.0 - lambda)))
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn horizon(&self) -> usize {
        self.probs.dim().0
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Tags the policy with an identifier copied onto sampled trajectories.
    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }
}

/// One executed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// One H-step episode. `policy_id` identifies the executing policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub policy_id: u64,
}

/// Per-layer state-action visitation masses. A full occupancy sums to 1 on
/// every layer; trusted occupancies are sub-probability measures with
/// layerwise non-increasing total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTensor {
    pub mass: Array3<f64>, // (layers, S, A)
}

impl OccupancyTensor {
    pub fn layers(&self) -> usize {
        self.mass.dim().0
    }

    pub fn layer_total(&self, h: usize) -> f64 {
        self.mass.index_axis(ndarray::Axis(0), h).sum()
    }

    /// State marginal `d[h][s] = sum_a d[h][s][a]`.
    pub fn state_marginal(&self, h: usize) -> ndarray::Array1<f64> {
        self.mass.index_axis(ndarray::Axis(0), h).sum_axis(ndarray::Axis(1))
    }
}

/// Ground-truth or hypothesized tabular environment.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    dims: Dims,
    transitions: Array4<f64>,  // (H, S, A, S)
    mean_rewards: Array3<f64>, // (H, S, A), entries in [0, 1/H]
}

impl TabularMdp {
    pub fn new(dims: Dims, transitions: Array4<f64>, mean_rewards: Array3<f64>) -> Result<Self> {
        let (h, s, a) = (dims.horizon, dims.num_states, dims.num_actions);
        if transitions.dim() != (h, s, a, s) {
            return Err(Error::DimensionMismatch(format!(
                "transitions shape {:?}, expected {:?}",
                transitions.dim(),
                (h, s, a, s)
            )));
        }
        if mean_rewards.dim() != (h, s, a) {
            return Err(Error::DimensionMismatch(format!(
                "rewards shape {:?}, expected {:?}",
                mean_rewards.dim(),
                (h, s, a)
            )));
        }
        let mut transitions = transitions;
        normalize_rows4(&mut transitions)?;
        let cap = 1.0 / h as f64;
        for ((layer, st, ac), &r) in mean_rewards.indexed_iter() {
            if r < -SIMPLEX_TOL || r > cap + SIMPLEX_TOL {
                return Err(Error::OutOfRange(format!(
                    "mean reward {r} at ({layer},{st},{ac}) outside [0, 1/H]"
                )));
            }
        }
        let mean_rewards = mean_rewards.mapv(|r| r.clamp(0.0, cap));
        Ok(Self { dims, transitions, mean_rewards })
    }

    /// Maximally uninformative model: uniform transitions, zero rewards.
    pub fn uniform_uninformative(dims: Dims) -> Self {
        let (h, s, a) = (dims.horizon, dims.num_states, dims.num_actions);
        Self {
            dims,
            transitions: Array4::from_elem((h, s, a, s), 1.0 / s as f64),
            mean_rewards: Array3::zeros((h, s, a)),
        }
    }

    /// Random dense instance: transition rows from normalized exponential
    /// draws, mean rewards uniform in `[0, reward_cap]` with
    /// `reward_cap <= 1/H`.
    pub fn random<R: Rng + ?Sized>(dims: Dims, reward_cap: f64, rng: &mut R) -> Result<Self> {
        let (h, s, a) = (dims.horizon, dims.num_states, dims.num_actions);
        if reward_cap < 0.0 || reward_cap > 1.0 / h as f64 {
            return Err(Error::OutOfRange(format!("reward cap {reward_cap} outside [0, 1/H]")));
        }
        let mut transitions = Array4::zeros((h, s, a, s));
        for layer in 0..h {
            for st in 0..s {
                for ac in 0..a {
                    let mut total = 0.0;
                    for ns in 0..s {
                        let w = -(1.0 - rng.random::<f64>()).ln();
                        transitions[(layer, st, ac, ns)] = w;
                        total += w;
                    }
                    for ns in 0..s {
                        transitions[(layer, st, ac, ns)] /= total;
                    }
                }
            }
        }
        let mean_rewards =
            Array3::from_shape_simple_fn((h, s, a), || rng.random::<f64>() * reward_cap);
        Self::new(dims, transitions, mean_rewards)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    pub fn num_states(&self) -> usize {
        self.dims.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.dims.num_actions
    }

    pub fn start_state(&self) -> usize {
        self.dims.start_state
    }

    pub fn transitions(&self) -> &Array4<f64> {
        &self.transitions
    }

    pub fn mean_rewards(&self) -> &Array3<f64> {
        &self.mean_rewards
    }

    /// Kernel table at layer `h`, shape (S, A, S).
    pub fn kernel(&self, h: usize) -> ArrayView3<'_, f64> {
        self.transitions.index_axis(ndarray::Axis(0), h)
    }

    /// Reward table at layer `h`, shape (S, A).
    pub fn rewards(&self, h: usize) -> ArrayView2<'_, f64> {
        self.mean_rewards.index_axis(ndarray::Axis(0), h)
    }

    pub fn check_policy(&self, policy: &Policy) -> Result<()> {
        let (h, s, a) = policy.probs.dim();
        if (h, s, a) != (self.dims.horizon, self.dims.num_states, self.dims.num_actions) {
            return Err(Error::DimensionMismatch(format!(
                "policy shape {:?} vs model {:?}",
                (h, s, a),
                (self.dims.horizon, self.dims.num_states, self.dims.num_actions)
            )));
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &TabularMdp) -> Result<()> {
        self.dims.require_eq(&other.dims, "model pair")
    }

    /// Serializes to the documented JSON schema (version 1, row-major tensors).
    pub fn to_json(&self) -> String {
        let schema = TabularMdpSchema {
            version: 1,
            horizon: self.dims.horizon,
            num_states: self.dims.num_states,
            num_actions: self.dims.num_actions,
            start_state: self.dims.start_state,
            transitions: self.transitions.iter().copied().collect(),
            mean_rewards: self.mean_rewards.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&schema).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: TabularMdpSchema = serde_json::from_str(text)?;
        if schema.version != 1 {
            return Err(Error::Serialization(format!(
                "unsupported tabular MDP schema version {}",
                schema.version
            )));
        }
        let dims = Dims::new(schema.horizon, schema.num_states, schema.num_actions, schema.start_state)?;
        let (h, s, a) = (dims.horizon, dims.num_states, dims.num_actions);
        let transitions = Array4::from_shape_vec((h, s, a, s), schema.transitions)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let mean_rewards = Array3::from_shape_vec((h, s, a), schema.mean_rewards)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        Self::new(dims, transitions, mean_rewards)
    }
}

#[derive(Serialize, Deserialize)]
struct TabularMdpSchema {
    version: u32,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    start_state: usize,
    transitions: Vec<f64>,
    mean_rewards: Vec<f64>,
}

pub(crate) fn normalize_row(row: &mut [f64], location: impl Fn() -> String) -> Result<()> {
    let mut sum = 0.0;
    for &x in row.iter() {
        if x < -SIMPLEX_TOL {
            return Err(Error::InvalidDistribution {
                location: location(),
                reason: format!("negative entry {x}"),
            });
        }
        sum += x.max(0.0);
    }
    if (sum - 1.0).abs() > ROW_REPAIR_TOL {
        return Err(Error::InvalidDistribution {
            location: location(),
            reason: format!("row sums to {sum}, not 1"),
        });
    }
    // Rows already inside the invariant tolerance are kept bit-exact so that
    // serialization round-trips are deterministic; only dusty rows are repaired.
    let clean = (sum - 1.0).abs() <= SIMPLEX_TOL && row.iter().all(|&x| x >= 0.0);
    if !clean {
        for x in row.iter_mut() {
            *x = x.max(0.0) / sum;
        }
    }
    Ok(())
}

fn normalize_rows3(t: &mut Array3<f64>, what: &str) -> Result<()> {
    let (h, s, _) = t.dim();
    for layer in 0..h {
        for st in 0..s {
            let mut row: Vec<f64> = t.slice(ndarray::s![layer, st, ..]).to_vec();
            normalize_row(&mut row, || format!("{what}[{layer}][{st}]"))?;
            t.slice_mut(ndarray::s![layer, st, ..])
                .assign(&ndarray::Array1::from_vec(row));
        }
    }
    Ok(())
}

fn normalize_rows4(t: &mut Array4<f64>) -> Result<()> {
    let (h, s, a, _) = t.dim();
    for layer in 0..h {
        for st in 0..s {
            for ac in 0..a {
                let mut row: Vec<f64> = t.slice(ndarray::s![layer, st, ac, ..]).to_vec();
                normalize_row(&mut row, || format!("transitions[{layer}][{st}][{ac}]"))?;
                t.slice_mut(ndarray::s![layer, st, ac, ..])
                    .assign(&ndarray::Array1::from_vec(row));
            }
        }
    }
    Ok(())
}

/// Samples an index from a nonnegative weight row summing to ~1.
fn sample_categorical<R: Rng + ?Sized>(weights: ndarray::ArrayView1<'_, f64>, rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Rolls out one episode of `policy` in `mdp`. Deterministic given the
/// random source state. Draw order per step: action, reward, next state.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &Policy,
    rng: &mut R,
) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    let h = mdp.horizon();
    let noise = RewardNoiseModel::BernoulliScaled;
    let mut steps = Vec::with_capacity(h);
    let mut state = mdp.start_state();
    for layer in 0..h {
        let action = sample_categorical(policy.probs().slice(ndarray::s![layer, state, ..]), rng);
        let reward = noise.sample(mdp.mean_rewards[(layer, state, action)], h, rng);
        steps.push(Step { state, action, reward });
        if layer + 1 < h {
            state = sample_categorical(
                mdp.transitions.slice(ndarray::s![layer, state, action, ..]),
                rng,
            );
        }
    }
    Ok(Trajectory { steps, policy_id: policy.id() })
}

/// Raw-table forward pass: per-layer state-action masses plus pre-policy
/// state masses. The table may sit off the simplex (multilinear extension).
pub(crate) fn forward_masses_raw(
    mdp: &TabularMdp,
    probs: &Array3<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (h, s, a) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut mass = Array3::zeros((h, s, a));
    let mut states = Array2::zeros((h, s));
    let mut state_mass = ndarray::Array1::zeros(s);
    state_mass[mdp.start_state()] = 1.0;
    for layer in 0..h {
        states.row_mut(layer).assign(&state_mass);
        for st in 0..s {
            if state_mass[st] == 0.0 {
                continue;
            }
            for ac in 0..a {
                mass[(layer, st, ac)] = state_mass[st] * probs[(layer, st, ac)];
            }
        }
        if layer + 1 < h {
            let mut next = ndarray::Array1::zeros(s);
            for st in 0..s {
                for ac in 0..a {
                    let m = mass[(layer, st, ac)];
                    if m == 0.0 {
                        continue;
                    }
                    for ns in 0..s {
                        next[ns] += m * mdp.transitions[(layer, st, ac, ns)];
                    }
                }
            }
            state_mass = next;
        }
    }
    (mass, states)
}

/// Exact per-layer state-action visitation probabilities of `policy` in `mdp`.
pub fn occupancy_forward(mdp: &TabularMdp, policy: &Policy) -> Result<OccupancyTensor> {
    mdp.check_policy(policy)?;
    let (mass, _) = forward_masses_raw(mdp, policy.probs());
    Ok(OccupancyTensor { mass })
}

/// Exact Q/V tables and start-state value of `policy` in `mdp`.
#[derive(Debug, Clone)]
pub struct ValueBackward {
    pub value: f64,
    /// Shape (H, S, A).
    pub q: Array3<f64>,
    /// Shape (H+1, S); the terminal layer is zero.
    pub v: Array2<f64>,
}

pub fn value_backward(mdp: &TabularMdp, policy: &Policy) -> Result<ValueBackward> {
    mdp.check_policy(policy)?;
    Ok(value_backward_raw(mdp, policy.probs()))
}

/// Raw-table backward pass (multilinear extension off the simplex).
pub(crate) fn value_backward_raw(mdp: &TabularMdp, pi: &Array3<f64>) -> ValueBackward {
    let (h, s, a) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut q = Array3::zeros((h, s, a));
    let mut v = Array2::zeros((h + 1, s));
    for layer in (0..h).rev() {
        for st in 0..s {
            let mut vs = 0.0;
            for ac in 0..a {
                let mut qa = mdp.mean_rewards[(layer, st, ac)];
                if layer + 1 < h {
                    for ns in 0..s {
                        qa += mdp.transitions[(layer, st, ac, ns)] * v[(layer + 1, ns)];
                    }
                }
                q[(layer, st, ac)] = qa;
                vs += pi[(layer, st, ac)] * qa;
            }
            v[(layer, st)] = vs;
        }
    }
    let value = v[(0, mdp.start_state())];
    ValueBackward { value, q, v }
}

/// Greedy backward induction. Ties break toward the lowest action index, so
/// the returned deterministic policy is unique.
pub fn optimal_policy_plan(mdp: &TabularMdp) -> Result<(Policy, f64)> {
    let (h, s, a) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let mut v = ndarray::Array1::zeros(s);
    let mut choice = Array2::zeros((h, s));
    for layer in (0..h).rev() {
        let mut next_v = ndarray::Array1::zeros(s);
        for st in 0..s {
            let mut best = f64::NEG_INFINITY;
            let mut best_a = 0usize;
            for ac in 0..a {
                let mut qa = mdp.mean_rewards[(layer, st, ac)];
                if layer + 1 < h {
                    for ns in 0..s {
                        qa += mdp.transitions[(layer, st, ac, ns)] * v[ns];
                    }
                }
                if qa > best {
                    best = qa;
                    best_a = ac;
                }
            }
            choice[(layer, st)] = best_a;
            next_v[st] = best;
        }
        v = next_v;
    }
    let policy = Policy::deterministic(mdp.dims(), &choice)?;
    Ok((policy, v[mdp.start_state()]))
}

/// Exact optimality gap of `policy` under the ground-truth model.
pub fn regret_of_policy(truth: &TabularMdp, policy: &Policy) -> Result<f64> {
    let (_, v_star) = optimal_policy_plan(truth)?;
    let vb = value_backward(truth, policy)?;
    Ok(v_star - vb.value)
}

/// A state-action sequence; rewards are marginalized out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySkeleton {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

/// Enumerates all `(S*A)^H` state-action sequences with their probabilities
/// under `(mdp, policy)`; sequences not starting at the start state carry
/// probability zero. Test oracle for tiny instances.
pub fn enumerate_trajectories(
    mdp: &TabularMdp,
    policy: &Policy,
    cap: u128,
) -> Result<Vec<(TrajectorySkeleton, f64)>> {
    mdp.check_policy(policy)?;
    let (h, s, a) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let per_layer = (s as u128) * (a as u128);
    let mut size: u128 = 1;
    for _ in 0..h {
        size = size.saturating_mul(per_layer);
        if size > cap {
            return Err(Error::EnumerationCapExceeded { size, cap });
        }
    }
    let pi = policy.probs();
    let mut out = Vec::with_capacity(size as usize);
    let mut states = vec![0usize; h];
    let mut actions = vec![0usize; h];
    // Odometer over the (s, a) choices at each layer.
    let mut idx = vec![0usize; h];
    let combos = per_layer as usize;
    let total = (size) as usize;
    for flat in 0..total {
        let mut rem = flat;
        for layer in 0..h {
            let c = rem % combos;
            rem /= combos;
            states[layer] = c / a;
            actions[layer] = c % a;
            idx[layer] = c;
        }
        let mut p = if states[0] == mdp.start_state() { 1.0 } else { 0.0 };
        if p > 0.0 {
            for layer in 0..h {
                p *= pi[(layer, states[layer], actions[layer])];
                if layer + 1 < h {
                    p *= mdp.transitions[(layer, states[layer], actions[layer], states[layer + 1])];
                }
                if p == 0.0 {
                    break;
                }
            }
        }
        out.push((TrajectorySkeleton { states: states.clone(), actions: actions.clone() }, p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dims(h: usize, s: usize, a: usize) -> Dims {
        Dims::new(h, s, a, 0).unwrap()
    }

    #[test]
    fn degenerate_single_state_trajectory() {
        let dims = tiny_dims(2, 1, 1);
        let mdp = TabularMdp::new(
            dims,
            Array4::from_elem((2, 1, 1, 1), 1.0),
            Array3::from_elem((2, 1, 1), 0.5),
        )
        .unwrap();
        let policy = Policy::uniform(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let traj = sample_trajectory(&mdp, &policy, &mut rng).unwrap();
        assert_eq!(traj.steps.len(), 2);
        for step in &traj.steps {
            assert_eq!(step.state, 0);
            assert!(step.reward == 0.0 || step.reward == 0.5);
        }
    }

    #[test]
    fn deterministic_everything_is_seed_independent() {
        // Deterministic transitions and policy, H*r in {0,1} everywhere.
        let dims = tiny_dims(2, 2, 2);
        let mut p = Array4::zeros((2, 2, 2, 2));
        for layer in 0..2 {
            for st in 0..2 {
                for ac in 0..2 {
                    p[(layer, st, ac, (st + ac) % 2)] = 1.0;
                }
            }
        }
        let mut r = Array3::zeros((2, 2, 2));
        r[(0, 0, 1)] = 0.5; // H*r = 1: always emits 0.5
        let mdp = TabularMdp::new(dims, p, r).unwrap();
        let choice = Array2::from_elem((2, 2), 1usize);
        let policy = Policy::deterministic(&dims, &choice).unwrap();
        let t1 = sample_trajectory(&mdp, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let t2 = sample_trajectory(&mdp, &policy, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.steps[0].reward, 0.5);
        assert_eq!(t1.steps[1].state, 1);
    }

    #[test]
    fn occupancy_base_cases() {
        let dims = tiny_dims(1, 1, 2);
        let mdp = TabularMdp::new(
            dims,
            Array4::from_elem((1, 1, 2, 1), 1.0),
            Array3::zeros((1, 1, 2)),
        )
        .unwrap();
        let occ = occupancy_forward(&mdp, &Policy::uniform(&dims)).unwrap();
        assert!((occ.mass[(0, 0, 0)] - 0.5).abs() < SIMPLEX_TOL);
        assert!((occ.mass[(0, 0, 1)] - 0.5).abs() < SIMPLEX_TOL);
    }

    #[test]
    fn deterministic_occupancy_single_mass_per_layer() {
        let dims = tiny_dims(3, 3, 2);
        let mut p = Array4::zeros((3, 3, 2, 3));
        for layer in 0..3 {
            for st in 0..3 {
                for ac in 0..2 {
                    p[(layer, st, ac, (st + ac + 1) % 3)] = 1.0;
                }
            }
        }
        let mdp = TabularMdp::new(dims, p, Array3::zeros((3, 3, 2))).unwrap();
        let policy = Policy::deterministic(&dims, &Array2::from_elem((3, 3), 1usize)).unwrap();
        let occ = occupancy_forward(&mdp, &policy).unwrap();
        for layer in 0..3 {
            let nonzero: Vec<f64> = occ
                .mass
                .index_axis(ndarray::Axis(0), layer)
                .iter()
                .copied()
                .filter(|&m| m > 0.0)
                .collect();
            assert_eq!(nonzero.len(), 1);
            assert!((nonzero[0] - 1.0).abs() < SIMPLEX_TOL);
        }
    }

    #[test]
    fn occupancy_matches_enumeration() {
        let dims = tiny_dims(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = TabularMdp::random(dims, 0.5, &mut rng).unwrap();
        let policy = Policy::random_interior(&dims, &mut rng);
        let occ = occupancy_forward(&mdp, &policy).unwrap();
        let outcomes = enumerate_trajectories(&mdp, &policy, ENUMERATION_CAP).unwrap();
        assert_eq!(outcomes.len(), 16);
        let total: f64 = outcomes.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-10);
        for layer in 0..2 {
            for st in 0..2 {
                for ac in 0..2 {
                    let marg: f64 = outcomes
                        .iter()
                        .filter(|(sk, _)| sk.states[layer] == st && sk.actions[layer] == ac)
                        .map(|(_, p)| p)
                        .sum();
                    assert!((marg - occ.mass[(layer, st, ac)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn value_zero_rewards() {
        let dims = tiny_dims(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mdp = TabularMdp::random(dims, 0.0, &mut rng).unwrap();
        mdp.mean_rewards.fill(0.0);
        let vb = value_backward(&mdp, &Policy::uniform(&dims)).unwrap();
        assert_eq!(vb.value, 0.0);
        assert!(vb.q.iter().all(|&x| x == 0.0));
        assert!(vb.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_chain_reaches_value_one() {
        let dims = tiny_dims(3, 2, 1);
        let mut p = Array4::zeros((3, 2, 1, 2));
        for layer in 0..3 {
            for st in 0..2 {
                p[(layer, st, 0, (st + 1) % 2)] = 1.0;
            }
        }
        let r = Array3::from_elem((3, 2, 1), 1.0 / 3.0);
        let mdp = TabularMdp::new(dims, p, r).unwrap();
        let vb = value_backward(&mdp, &Policy::uniform(&dims)).unwrap();
        assert!((vb.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn value_equals_occupancy_reward_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let dims = tiny_dims(3, 3, 2);
            let mdp = TabularMdp::random(dims, 1.0 / 3.0, &mut rng).unwrap();
            let policy = Policy::random_interior(&dims, &mut rng);
            let vb = value_backward(&mdp, &policy).unwrap();
            let occ = occupancy_forward(&mdp, &policy).unwrap();
            let inner: f64 = (&occ.mass * mdp.mean_rewards()).sum();
            assert!((vb.value - inner).abs() < 1e-12);
        }
    }

    #[test]
    fn planner_ties_break_to_lowest_action() {
        let dims = tiny_dims(2, 2, 3);
        let mdp = TabularMdp::uniform_uninformative(dims);
        let (policy, value) = optimal_policy_plan(&mdp).unwrap();
        assert_eq!(value, 0.0);
        for layer in 0..2 {
            for st in 0..2 {
                assert_eq!(policy.probs()[(layer, st, 0)], 1.0);
            }
        }
    }

    #[test]
    fn planner_matches_brute_force_on_tiny_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let dims = tiny_dims(2, 2, 2);
            let mdp = TabularMdp::random(dims, 0.5, &mut rng).unwrap();
            let (_, planned) = optimal_policy_plan(&mdp).unwrap();
            let mut best = f64::NEG_INFINITY;
            // All deterministic policies: action per (layer, state).
            for combo in 0..(2usize.pow(4)) {
                let mut choice = Array2::zeros((2, 2));
                for (i, slot) in choice.iter_mut().enumerate() {
                    *slot = (combo >> i) & 1;
                }
                let pol = Policy::deterministic(&dims, &choice).unwrap();
                best = best.max(value_backward(&mdp, &pol).unwrap().value);
            }
            assert!((planned - best).abs() < 1e-12);
        }
    }

    #[test]
    fn single_rewarding_path_is_found() {
        let dims = tiny_dims(2, 2, 2);
        let mut p = Array4::zeros((2, 2, 2, 2));
        // Action 1 at the start moves to state 1; everything else loops at 0.
        for layer in 0..2 {
            for st in 0..2 {
                for ac in 0..2 {
                    let dst = if st == 0 && ac == 1 { 1 } else { 0 };
                    p[(layer, st, ac, dst)] = 1.0;
                }
            }
        }
        let mut r = Array3::zeros((2, 2, 2));
        r[(1, 1, 0)] = 0.5; // only reachable via action 1 then action 0
        let mdp = TabularMdp::new(dims, p, r).unwrap();
        let (policy, value) = optimal_policy_plan(&mdp).unwrap();
        assert!((value - 0.5).abs() < 1e-12);
        assert_eq!(policy.probs()[(0, 0, 1)], 1.0);
        assert_eq!(policy.probs()[(1, 1, 0)], 1.0);
    }

    #[test]
    fn regret_of_optimal_policy_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dims = tiny_dims(3, 3, 2);
        let mdp = TabularMdp::random(dims, 1.0 / 3.0, &mut rng).unwrap();
        let (opt, _) = optimal_policy_plan(&mdp).unwrap();
        assert!(regret_of_policy(&mdp, &opt).unwrap().abs() < 1e-12);
        let uniform_regret = regret_of_policy(&mdp, &Policy::uniform(&dims)).unwrap();
        assert!(uniform_regret >= -1e-12);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let dims = tiny_dims(8, 4, 4);
        let mdp = TabularMdp::uniform_uninformative(dims);
        let err = enumerate_trajectories(&mdp, &Policy::uniform(&dims), ENUMERATION_CAP);
        assert!(matches!(err, Err(Error::EnumerationCapExceeded { .. })));
    }

    #[test]
    fn deterministic_instance_enumerates_to_single_outcome() {
        let dims = tiny_dims(2, 2, 1);
        let mut p = Array4::zeros((2, 2, 1, 2));
        for layer in 0..2 {
            for st in 0..2 {
                p[(layer, st, 0, st)] = 1.0;
            }
        }
        let mdp = TabularMdp::new(dims, p, Array3::zeros((2, 2, 1))).unwrap();
        let outcomes =
            enumerate_trajectories(&mdp, &Policy::uniform(&dims), ENUMERATION_CAP).unwrap();
        let positive: Vec<_> = outcomes.iter().filter(|(_, p)| *p > 0.0).collect();
        assert_eq!(positive.len(), 1);
        assert!((positive[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_transition_two_outcomes() {
        let dims = tiny_dims(1, 2, 1);
        let mdp = TabularMdp::uniform_uninformative(dims);
        let outcomes =
            enumerate_trajectories(&mdp, &Policy::uniform(&dims), ENUMERATION_CAP).unwrap();
        // H=1: only the start-state outcome has positive probability.
        let positive: Vec<_> = outcomes.iter().filter(|(_, p)| *p > 0.0).collect();
        assert_eq!(positive.len(), 1);
    }

    #[test]
    fn monte_carlo_visits_match_occupancy() {
        let dims = tiny_dims(2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mdp = TabularMdp::random(dims, 0.5, &mut rng).unwrap();
        let policy = Policy::random_interior(&dims, &mut rng);
        let occ = occupancy_forward(&mdp, &policy).unwrap();
        let n = 100_000usize;
        let mut counts = Array3::<f64>::zeros((2, 2, 2));
        for _ in 0..n {
            let traj = sample_trajectory(&mdp, &policy, &mut rng).unwrap();
            for (layer, step) in traj.steps.iter().enumerate() {
                counts[(layer, step.state, step.action)] += 1.0;
            }
        }
        for ((layer, st, ac), &c) in counts.indexed_iter() {
            let p = occ.mass[(layer, st, ac)];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (c / n as f64 - p).abs() <= 3.0 * se + 1e-9,
                "layer {layer} ({st},{ac}): {} vs {p}",
                c / n as f64
            );
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = tiny_dims(2, 3, 2);
        let mdp = TabularMdp::random(dims, 0.4, &mut rng).unwrap();
        let text = mdp.to_json();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn bad_rows_are_rejected() {
        let dims = tiny_dims(1, 2, 1);
        let mut p = Array4::from_elem((1, 2, 1, 2), 0.4); // rows sum to 0.8
        let r = Array3::zeros((1, 2, 1));
        assert!(TabularMdp::new(dims, p.clone(), r.clone()).is_err());
        p[(0, 0, 0, 0)] = -0.1;
        assert!(TabularMdp::new(dims, p, r).is_err());
    }
}
