//! Linear MDPs at desk scale: known feature maps, coefficient maps for
//! transitions and rewards, the normalization constant, state-gated trusted
//! sets and occupancies, trusted feature covariance matrices, the offline
//! least-squares regression oracle, and the one-hot tabular embedding used
//! for cross-validation.
//!
//! The countable state space of the linear model is represented by a finite
//! desk-scale state list; nothing in the algorithms exploits finiteness
//! beyond replacing integrals with sums.

use crate::error::{Error, Result};
use crate::estimate::{lse_estimate, EstimationReport, ModelClass};
use crate::mdp::{Dims, OccupancyTensor, Policy, TabularMdp, Trajectory};
use crate::trusted::AggregatedModel;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use serde::{Deserialize, Serialize};

/// Transition rows must sum to 1 within this tolerance and entries must be
/// at least `-LINEAR_KERNEL_TOL`.
pub const LINEAR_KERNEL_TOL: f64 = 1e-10;

/// Linear MDP: transitions `P^h(s'|s,a) = <phi_h(s,a), mu^{h+1}(s')>` and
/// rewards `r^h(s,a) = <phi_h(s,a), theta^h>`. Features are known to the
/// learner; `mu` and `theta` are the unknowns a class hypothesizes over.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMdp {
    dims: Dims,
    feature_dim: usize,
    features: Array4<f64>, // (H, S, A, d)
    mu: Array3<f64>,       // (H, S, d): mu[h][s'] carries flow from layer h into s'
    theta: Array2<f64>,    // (H, d)
}

impl LinearMdp {
    pub fn new(
        dims: Dims,
        feature_dim: usize,
        features: Array4<f64>,
        mu: Array3<f64>,
        theta: Array2<f64>,
    ) -> Result<Self> {
        let (h, s, a, d) = (dims.horizon, dims.num_states, dims.num_actions, feature_dim);
        if d == 0 {
            return Err(Error::OutOfRange("feature dimension must be positive".into()));
        }
        if features.dim() != (h, s, a, d) {
            return Err(Error::DimensionMismatch(format!(
                "features shape {:?}, expected {:?}",
                features.dim(),
                (h, s, a, d)
            )));
        }
        if mu.dim() != (h, s, d) {
            return Err(Error::DimensionMismatch(format!(
                "mu shape {:?}, expected {:?}",
                mu.dim(),
                (h, s, d)
            )));
        }
        if theta.dim() != (h, d) {
            return Err(Error::DimensionMismatch(format!(
                "theta shape {:?}, expected {:?}",
                theta.dim(),
                (h, d)
            )));
        }
        let model = Self { dims, feature_dim, features, mu, theta };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let (h, s, a) = (self.dims.horizon, self.dims.num_states, self.dims.num_actions);
        let reward_cap = 1.0 / h as f64;
        for layer in 0..h {
            for st in 0..s {
                for ac in 0..a {
                    let phi = self.feature(layer, st, ac);
                    let norm = phi.dot(&phi).sqrt();
                    if norm > 1.0 + 1e-12 {
                        return Err(Error::OutOfRange(format!(
                            "feature norm {norm} at ({layer},{st},{ac}) above 1"
                        )));
                    }
                    let mut row_sum = 0.0;
                    for ns in 0..s {
                        let p = phi.dot(&self.mu.slice(ndarray::s![layer, ns, ..]));
                        if p < -LINEAR_KERNEL_TOL {
                            return Err(Error::InvalidDistribution {
                                location: format!("linear kernel ({layer},{st},{ac})->{ns}"),
                                reason: format!("negative probability {p}"),
                            });
                        }
                        row_sum += p.max(0.0);
                    }
                    if (row_sum - 1.0).abs() > LINEAR_KERNEL_TOL {
                        return Err(Error::InvalidDistribution {
                            location: format!("linear kernel row ({layer},{st},{ac})"),
                            reason: format!("sums to {row_sum}"),
                        });
                    }
                    let r = phi.dot(&self.theta.row(layer));
                    if r < -LINEAR_KERNEL_TOL || r > reward_cap + LINEAR_KERNEL_TOL {
                        return Err(Error::OutOfRange(format!(
                            "linear reward {r} at ({layer},{st},{ac}) outside [0, 1/H]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &Array4<f64> {
        &self.features
    }

    pub fn mu(&self) -> &Array3<f64> {
        &self.mu
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn feature(&self, h: usize, s: usize, a: usize) -> ArrayView1<'_, f64> {
        self.features.slice(ndarray::s![h, s, a, ..])
    }

    /// Transition distribution `<phi_h(s,a), mu^{h+1}(.)>` over arriving states.
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> Array1<f64> {
        let phi = self.feature(h, s, a);
        let mut row = Array1::zeros(self.dims.num_states);
        for ns in 0..self.dims.num_states {
            row[ns] = phi.dot(&self.mu.slice(ndarray::s![h, ns, ..])).max(0.0);
        }
        row
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.feature(h, s, a)
            .dot(&self.theta.row(h))
            .clamp(0.0, 1.0 / self.dims.horizon as f64)
    }

    /// Materializes the induced dense tabular model; values, occupancies and
    /// trajectory distributions of the two representations coincide.
    pub fn to_tabular(&self) -> Result<TabularMdp> {
        let (h, s, a) = (self.dims.horizon, self.dims.num_states, self.dims.num_actions);
        let mut transitions = Array4::zeros((h, s, a, s));
        let mut rewards = Array3::zeros((h, s, a));
        for layer in 0..h {
            for st in 0..s {
                for ac in 0..a {
                    let row = self.transition_row(layer, st, ac);
                    let total: f64 = row.sum();
                    for ns in 0..s {
                        transitions[(layer, st, ac, ns)] = row[ns] / total;
                    }
                    rewards[(layer, st, ac)] = self.reward(layer, st, ac);
                }
            }
        }
        TabularMdp::new(self.dims, transitions, rewards)
    }

    pub fn to_json(&self) -> String {
        let schema = LinearMdpSchema {
            version: 1,
            horizon: self.dims.horizon,
            num_states: self.dims.num_states,
            num_actions: self.dims.num_actions,
            start_state: self.dims.start_state,
            feature_dim: self.feature_dim,
            features: self.features.iter().copied().collect(),
            mu: self.mu.iter().copied().collect(),
            theta: self.theta.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&schema).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: LinearMdpSchema = serde_json::from_str(text)?;
        if schema.version != 1 {
            return Err(Error::Serialization(format!(
                "unsupported linear MDP schema version {}",
                schema.version
            )));
        }
        let dims = Dims::new(schema.horizon, schema.num_states, schema.num_actions, schema.start_state)?;
        let (h, s, a, d) = (dims.horizon, dims.num_states, dims.num_actions, schema.feature_dim);
        let features = Array4::from_shape_vec((h, s, a, d), schema.features)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let mu = Array3::from_shape_vec((h, s, d), schema.mu)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let theta = Array2::from_shape_vec((h, d), schema.theta)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        Self::new(dims, d, features, mu, theta)
    }
}

#[derive(Serialize, Deserialize)]
struct LinearMdpSchema {
    version: u32,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    start_state: usize,
    feature_dim: usize,
    features: Vec<f64>,
    mu: Vec<f64>,
    theta: Vec<f64>,
}

/// One-hot embedding of a tabular MDP: `d = S*A`, `phi_h(s,a) = e_{(s,a)}`,
/// `mu^{h+1}(s')[(s,a)] = P[h][s][a][s']`, `theta^h[(s,a)] = r[h][s][a]`.
pub fn tabular_to_linear(mdp: &TabularMdp) -> Result<LinearMdp> {
    let (h, s, a) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let d = s * a;
    let mut features = Array4::zeros((h, s, a, d));
    let mut mu = Array3::zeros((h, s, d));
    let mut theta = Array2::zeros((h, d));
    for layer in 0..h {
        for st in 0..s {
            for ac in 0..a {
                let k = st * a + ac;
                features[(layer, st, ac, k)] = 1.0;
                theta[(layer, k)] = mdp.mean_rewards()[(layer, st, ac)];
                for ns in 0..s {
                    mu[(layer, ns, k)] = mdp.transitions()[(layer, st, ac, ns)];
                }
            }
        }
    }
    LinearMdp::new(*mdp.dims(), d, features, mu, theta)
}

/// The normalization constant `c_M = max_h sum_{s'} ||mu^{h+1}(s')||^{1/2}`
/// (literal square-root-of-norm exponent) plus the theta-norm validity check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormalizationReport {
    pub c_m: f64,
    pub passes: bool,
}

pub fn normalization_constant(model: &LinearMdp) -> Result<NormalizationReport> {
    let (h, s) = (model.dims.horizon, model.dims.num_states);
    for layer in 0..h {
        let t = model.theta.row(layer);
        let norm = t.dot(&t).sqrt();
        if norm > 1.0 + 1e-12 {
            return Err(Error::OutOfRange(format!(
                "theta norm {norm} at layer {layer} above 1"
            )));
        }
    }
    let mut c_m = 0.0_f64;
    for layer in 0..h {
        let mut layer_sum = 0.0;
        for ns in 0..s {
            let m = model.mu.slice(ndarray::s![layer, ns, ..]);
            layer_sum += m.dot(&m).sqrt().sqrt();
        }
        c_m = c_m.max(layer_sum);
    }
    Ok(NormalizationReport { c_m, passes: c_m.is_finite() })
}

/// Finite family of linear models sharing dimensions and feature map.
#[derive(Debug, Clone)]
pub struct LinearModelClass {
    models: Vec<LinearMdp>,
    realizable_index: Option<usize>,
}

impl LinearModelClass {
    pub fn new(models: Vec<LinearMdp>, realizable_index: Option<usize>) -> Result<Self> {
        let first = models.first().ok_or(Error::EmptyData)?;
        for m in &models[1..] {
            if m.dims() != first.dims() || m.feature_dim() != first.feature_dim() {
                return Err(Error::DimensionMismatch("linear class member".into()));
            }
            let diff = (&m.features - &first.features).mapv(f64::abs);
            if diff.iter().cloned().fold(0.0, f64::max) > 1e-12 {
                return Err(Error::DimensionMismatch(
                    "class members must share the known feature map".into(),
                ));
            }
        }
        if let Some(i) = realizable_index {
            if i >= models.len() {
                return Err(Error::OutOfRange(format!("realizable index {i}")));
            }
        }
        Ok(Self { models, realizable_index })
    }

    pub fn models(&self) -> &[LinearMdp] {
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

    pub fn get(&self, i: usize) -> &LinearMdp {
        &self.models[i]
    }

    /// Largest normalization constant over the class.
    pub fn class_normalization(&self) -> Result<f64> {
        let mut c = 0.0_f64;
        for m in &self.models {
            c = c.max(normalization_constant(m)?.c_m);
        }
        Ok(c)
    }

    /// Induced tabular family, preserving order and realizable index.
    pub fn to_tabular_class(&self) -> Result<ModelClass> {
        let induced = self
            .models
            .iter()
            .map(|m| m.to_tabular())
            .collect::<Result<Vec<_>>>()?;
        ModelClass::new(induced, self.realizable_index)
    }
}

/// Offline least-squares regression oracle for linear models: identical
/// squared-loss criterion as the tabular estimator, evaluated through the
/// induced trajectory distributions.
pub fn lse_linear(
    class: &LinearModelClass,
    data: &[Trajectory],
    policy: &Policy,
) -> Result<EstimationReport> {
    lse_estimate(&class.to_tabular_class()?, data, policy)
}

/// One estimated layer of a linear model: coefficient vectors plus the
/// induced kernel rows and rewards they generate.
#[derive(Debug, Clone)]
pub struct LinearLayerEstimate {
    pub layer: usize,
    pub mu_hat: Array2<f64>,    // (S, d)
    pub theta_hat: Array1<f64>, // (d,)
    pub p_hat: Array3<f64>,     // (S, A, S) induced rows
    pub r_hat: Array2<f64>,     // (S, A) induced rewards
}

impl LinearLayerEstimate {
    /// Extracts layer `layer` of a hypothesis model.
    pub fn from_model(model: &LinearMdp, layer: usize) -> Self {
        let (s, a) = (model.dims.num_states, model.dims.num_actions);
        let mut p_hat = Array3::zeros((s, a, s));
        let mut r_hat = Array2::zeros((s, a));
        for st in 0..s {
            for ac in 0..a {
                let row = model.transition_row(layer, st, ac);
                let total: f64 = row.sum();
                for ns in 0..s {
                    p_hat[(st, ac, ns)] = row[ns] / total;
                }
                r_hat[(st, ac)] = model.reward(layer, st, ac);
            }
        }
        Self {
            layer,
            mu_hat: model.mu.index_axis(ndarray::Axis(0), layer).to_owned(),
            theta_hat: model.theta.row(layer).to_owned(),
            p_hat,
            r_hat,
        }
    }
}

/// Per-epoch trusted state sets and layer estimates for linear MDPs. The
/// trusted set is state-level: an arriving state is kept iff its estimated
/// inflow under the executed policy reaches `1/zeta`.
#[derive(Debug, Clone)]
pub struct TrustedStructureLinear {
    epoch: usize,
    zeta: f64,
    dims: Dims,
    feature_dim: usize,
    features: Array4<f64>,
    layer_estimates: Vec<Option<LinearLayerEstimate>>,
    trusted_states: Vec<Option<Vec<bool>>>,
}

impl TrustedStructureLinear {
    pub fn new(epoch: usize, zeta: f64, dims: Dims, features: Array4<f64>) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::Domain(format!("zeta {zeta} must be positive")));
        }
        let d = features.dim().3;
        if features.dim() != (dims.horizon, dims.num_states, dims.num_actions, d) || d == 0 {
            return Err(Error::DimensionMismatch("feature tensor".into()));
        }
        Ok(Self {
            epoch,
            zeta,
            dims,
            feature_dim: d,
            features,
            layer_estimates: (0..dims.horizon).map(|_| None).collect(),
            trusted_states: (0..dims.horizon).map(|_| None).collect(),
        })
    }

    /// Fully-populated structure: estimates from `model`, trusted state sets
    /// thresholded against the flows of `executed` at each layer.
    pub fn from_model_with_policy(
        epoch: usize,
        zeta: f64,
        model: &LinearMdp,
        executed: &Policy,
    ) -> Result<Self> {
        let mut st = Self::new(epoch, zeta, *model.dims(), model.features.clone())?;
        for layer in 0..model.dims.horizon {
            st.set_layer_estimate(LinearLayerEstimate::from_model(model, layer))?;
            if layer + 1 < model.dims.horizon {
                let set = st.build_trusted_states(executed, layer)?;
                st.insert_trusted_states(layer + 1, set)?;
            }
        }
        Ok(st)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &Array4<f64> {
        &self.features
    }

    pub fn layer_estimate(&self, layer: usize) -> Option<&LinearLayerEstimate> {
        self.layer_estimates.get(layer).and_then(|e| e.as_ref())
    }

    pub fn trusted_states(&self, arriving_layer: usize) -> Option<&Vec<bool>> {
        self.trusted_states.get(arriving_layer).and_then(|s| s.as_ref())
    }

    pub fn set_layer_estimate(&mut self, est: LinearLayerEstimate) -> Result<()> {
        let (s, a) = (self.dims.num_states, self.dims.num_actions);
        if est.layer >= self.dims.horizon
            || est.p_hat.dim() != (s, a, s)
            || est.r_hat.dim() != (s, a)
            || est.mu_hat.dim() != (s, self.feature_dim)
            || est.theta_hat.len() != self.feature_dim
        {
            return Err(Error::DimensionMismatch("linear layer estimate".into()));
        }
        let layer = est.layer;
        self.layer_estimates[layer] = Some(est);
        Ok(())
    }

    pub fn insert_trusted_states(&mut self, arriving_layer: usize, set: Vec<bool>) -> Result<()> {
        if arriving_layer == 0 || arriving_layer >= self.dims.horizon {
            return Err(Error::OutOfRange(format!("arriving layer {arriving_layer}")));
        }
        if set.len() != self.dims.num_states {
            return Err(Error::DimensionMismatch("trusted state set".into()));
        }
        self.trusted_states[arriving_layer] = Some(set);
        Ok(())
    }

    fn require_estimate(&self, layer: usize) -> Result<&LinearLayerEstimate> {
        self.layer_estimate(layer).ok_or(Error::MissingLayer { layer, what: "layer estimate" })
    }

    fn require_set(&self, arriving_layer: usize) -> Result<&Vec<bool>> {
        self.trusted_states(arriving_layer)
            .ok_or(Error::MissingLayer { layer: arriving_layer, what: "trusted state set" })
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.probs().dim() != (self.dims.horizon, self.dims.num_states, self.dims.num_actions) {
            return Err(Error::DimensionMismatch("policy vs linear trusted structure".into()));
        }
        Ok(())
    }

    /// Raw-table trusted forward pass through the layer estimates, gating on
    /// arriving states; also returns pre-policy state masses.
    pub(crate) fn forward_masses(
        &self,
        probs: &Array3<f64>,
        upto_layer: usize,
    ) -> Result<(Array3<f64>, Array2<f64>)> {
        if upto_layer >= self.dims.horizon {
            return Err(Error::OutOfRange(format!("layer {upto_layer}")));
        }
        let (s_n, a_n) = (self.dims.num_states, self.dims.num_actions);
        let mut mass = Array3::zeros((upto_layer + 1, s_n, a_n));
        let mut states = Array2::zeros((upto_layer + 1, s_n));
        let mut state_mass = Array1::<f64>::zeros(s_n);
        state_mass[self.dims.start_state] = 1.0;
        for layer in 0..=upto_layer {
            states.row_mut(layer).assign(&state_mass);
            for st in 0..s_n {
                if state_mass[st] == 0.0 {
                    continue;
                }
                for ac in 0..a_n {
                    mass[(layer, st, ac)] = state_mass[st] * probs[(layer, st, ac)];
                }
            }
            if layer < upto_layer {
                let est = self.require_estimate(layer)?;
                let set = self.require_set(layer + 1)?;
                let mut next = Array1::<f64>::zeros(s_n);
                for st in 0..s_n {
                    for ac in 0..a_n {
                        let m = mass[(layer, st, ac)];
                        if m == 0.0 {
                            continue;
                        }
                        for ns in 0..s_n {
                            if set[ns] {
                                next[ns] += m * est.p_hat[(st, ac, ns)];
                            }
                        }
                    }
                }
                state_mass = next;
            }
        }
        Ok((mass, states))
    }

    /// Trusted occupancy for layers `0..=upto_layer`; a sub-probability
    /// measure per layer.
    pub fn trusted_occupancy(&self, policy: &Policy, upto_layer: usize) -> Result<OccupancyTensor> {
        self.check_policy(policy)?;
        let (mass, _) = self.forward_masses(policy.probs(), upto_layer)?;
        Ok(OccupancyTensor { mass })
    }

    /// Trusted state set for arriving layer `layer + 1`: keeps `s'` iff the
    /// estimated inflow of the executed policy reaches `1/zeta` (inclusive).
    pub fn build_trusted_states(&self, executed_policy: &Policy, layer: usize) -> Result<Vec<bool>> {
        if layer + 1 >= self.dims.horizon {
            return Err(Error::OutOfRange(format!(
                "no arriving layer beyond {layer} at horizon {}",
                self.dims.horizon
            )));
        }
        let est = self.require_estimate(layer)?;
        let occ = self.trusted_occupancy(executed_policy, layer)?;
        let (s_n, a_n) = (self.dims.num_states, self.dims.num_actions);
        let threshold = 1.0 / self.zeta;
        let mut set = vec![false; s_n];
        for (ns, slot) in set.iter_mut().enumerate() {
            let mut inflow = 0.0;
            for st in 0..s_n {
                for ac in 0..a_n {
                    inflow += occ.mass[(layer, st, ac)] * est.p_hat[(st, ac, ns)];
                }
            }
            *slot = inflow >= threshold;
        }
        Ok(set)
    }

    /// Trusted feature covariance `K[j] = sum_{s,a} phi_j phi_j^T d~^j(s,a; pi)`.
    pub fn trusted_covariance(&self, policy: &Policy, layer: usize) -> Result<Array2<f64>> {
        self.check_policy(policy)?;
        let (mass, _) = self.forward_masses(policy.probs(), layer)?;
        Ok(self.covariance_of_layer(&mass, layer))
    }

    /// Covariance of one layer given a mass tensor covering it.
    pub(crate) fn covariance_of_layer(&self, mass: &Array3<f64>, layer: usize) -> Array2<f64> {
        let (s_n, a_n, d) = (self.dims.num_states, self.dims.num_actions, self.feature_dim);
        let mut k = Array2::zeros((d, d));
        for st in 0..s_n {
            for ac in 0..a_n {
                let m = mass[(layer, st, ac)];
                if m == 0.0 {
                    continue;
                }
                let phi = self.features.slice(ndarray::s![layer, st, ac, ..]);
                for i in 0..d {
                    let pi_m = phi[i] * m;
                    if pi_m == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        k[(i, j)] += pi_m * phi[j];
                    }
                }
            }
        }
        k
    }

    /// Stitches the per-layer induced estimates into the epoch's aggregated
    /// model (a dense tabular view of the estimated linear model).
    pub fn aggregate(&self) -> Result<AggregatedModel> {
        let (h, s, a) = (self.dims.horizon, self.dims.num_states, self.dims.num_actions);
        let mut transitions = Array4::zeros((h, s, a, s));
        let mut rewards = Array3::zeros((h, s, a));
        for layer in 0..h {
            let est = self.require_estimate(layer)?;
            transitions
                .index_axis_mut(ndarray::Axis(0), layer)
                .assign(&est.p_hat);
            rewards
                .index_axis_mut(ndarray::Axis(0), layer)
                .assign(&est.r_hat);
        }
        Ok(AggregatedModel::from_model(
            self.epoch,
            TabularMdp::new(self.dims, transitions, rewards)?,
        ))
    }

    /// Kept arriving states per layer (present sets only).
    pub fn trusted_set_sizes(&self) -> Vec<usize> {
        self.trusted_states
            .iter()
            .map(|s| s.as_ref().map_or(0, |set| set.iter().filter(|&&b| b).count()))
            .collect()
    }
}
