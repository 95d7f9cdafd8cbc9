//! Per-epoch trusted transition sets and trusted occupancy measures for
//! tabular MDPs, plus the mixture-policy construction that makes the set of
//! trusted occupancies convex.
//!
//! A trusted set at arriving layer `j+1` keeps the triples `(s, a, s')`
//! whose estimated flow under the segment's executed policy reaches the
//! `1/zeta` threshold; the trusted occupancy recursion routes mass only
//! through kept triples, so each layer's total mass is non-increasing.

use crate::error::{Error, Result};
use crate::mdp::{self, occupancy_forward, Dims, OccupancyTensor, Policy, TabularMdp, SIMPLEX_TOL};
use ndarray::{Array1, Array2, Array3, Array4};

/// One layer of an estimated model: the transition table feeding the next
/// layer and the mean-reward table at this layer.
#[derive(Debug, Clone)]
pub struct LayerEstimate {
    pub layer: usize,
    pub p_hat: Array3<f64>, // (S, A, S)
    pub r_hat: Array2<f64>, // (S, A)
}

impl LayerEstimate {
    pub fn new(layer: usize, p_hat: Array3<f64>, r_hat: Array2<f64>, horizon: usize) -> Result<Self> {
        let (s, a, s2) = p_hat.dim();
        if s != s2 || r_hat.dim() != (s, a) {
            return Err(Error::DimensionMismatch("layer estimate tables".into()));
        }
        let mut p_hat = p_hat;
        for st in 0..s {
            for ac in 0..a {
                let mut row: Vec<f64> = p_hat.slice(ndarray::s![st, ac, ..]).to_vec();
                mdp::normalize_row(&mut row, || format!("layer {layer} estimate [{st}][{ac}]"))?;
                p_hat
                    .slice_mut(ndarray::s![st, ac, ..])
                    .assign(&Array1::from_vec(row));
            }
        }
        let cap = 1.0 / horizon as f64;
        for (&r, idx) in r_hat.iter().zip(0..) {
            if r < -SIMPLEX_TOL || r > cap + SIMPLEX_TOL {
                return Err(Error::OutOfRange(format!(
                    "layer {layer} reward {r} at flat index {idx} outside [0, 1/H]"
                )));
            }
        }
        let r_hat = r_hat.mapv(|r| r.clamp(0.0, cap));
        Ok(Self { layer, p_hat, r_hat })
    }

    /// Extracts layer `layer` of an existing model.
    pub fn from_model(model: &TabularMdp, layer: usize) -> Self {
        Self {
            layer,
            p_hat: model.kernel(layer).to_owned(),
            r_hat: model.rewards(layer).to_owned(),
        }
    }
}

/// Per-epoch trusted transition sets plus the layer-wise estimates feeding
/// the trusted-occupancy recursion. Built causally within an epoch: the set
/// at arriving layer `h+1` only needs estimates and sets up to layer `h`.
#[derive(Debug, Clone)]
pub struct TrustedStructure {
    epoch: usize,
    zeta: f64,
    dims: Dims,
    layer_estimates: Vec<Option<LayerEstimate>>,
    /// Indexed by arriving layer; entry 0 is never used (layer 0 is exact).
    trusted_sets: Vec<Option<Array3<bool>>>,
}

impl TrustedStructure {
    pub fn new(epoch: usize, zeta: f64, dims: Dims) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::Domain(format!("zeta {zeta} must be positive")));
        }
        Ok(Self {
            epoch,
            zeta,
            dims,
            layer_estimates: (0..dims.horizon).map(|_| None).collect(),
            trusted_sets: (0..dims.horizon).map(|_| None).collect(),
        })
    }

    /// Builds a fully-populated structure the way an epoch would: layer
    /// estimates from `model`, trusted sets thresholded against the flows of
    /// `executed` at each layer.
    pub fn from_model_with_policy(
        epoch: usize,
        zeta: f64,
        model: &TabularMdp,
        executed: &Policy,
    ) -> Result<Self> {
        let mut st = Self::new(epoch, zeta, *model.dims())?;
        for layer in 0..model.horizon() {
            st.set_layer_estimate(LayerEstimate::from_model(model, layer))?;
            if layer + 1 < model.horizon() {
                let set = st.build_trusted_set(executed, layer)?;
                st.insert_trusted_set(layer + 1, set)?;
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

    pub fn layer_estimate(&self, layer: usize) -> Option<&LayerEstimate> {
        self.layer_estimates.get(layer).and_then(|e| e.as_ref())
    }

    pub fn trusted_set(&self, arriving_layer: usize) -> Option<&Array3<bool>> {
        self.trusted_sets.get(arriving_layer).and_then(|s| s.as_ref())
    }

    pub fn set_layer_estimate(&mut self, est: LayerEstimate) -> Result<()> {
        let (s, a, _) = est.p_hat.dim();
        if est.layer >= self.dims.horizon
            || s != self.dims.num_states
            || a != self.dims.num_actions
        {
            return Err(Error::DimensionMismatch("layer estimate".into()));
        }
        let layer = est.layer;
        self.layer_estimates[layer] = Some(est);
        Ok(())
    }

    pub fn insert_trusted_set(&mut self, arriving_layer: usize, set: Array3<bool>) -> Result<()> {
        let (s, a) = (self.dims.num_states, self.dims.num_actions);
        if arriving_layer == 0 || arriving_layer >= self.dims.horizon {
            return Err(Error::OutOfRange(format!("arriving layer {arriving_layer}")));
        }
        if set.dim() != (s, a, s) {
            return Err(Error::DimensionMismatch("trusted set tensor".into()));
        }
        self.trusted_sets[arriving_layer] = Some(set);
        Ok(())
    }

    fn require_estimate(&self, layer: usize) -> Result<&LayerEstimate> {
        self.layer_estimate(layer).ok_or(Error::MissingLayer { layer, what: "layer estimate" })
    }

    fn require_set(&self, arriving_layer: usize) -> Result<&Array3<bool>> {
        self.trusted_set(arriving_layer)
            .ok_or(Error::MissingLayer { layer: arriving_layer, what: "trusted set" })
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        let (h, s, a) = policy.probs().dim();
        if (h, s, a) != (self.dims.horizon, self.dims.num_states, self.dims.num_actions) {
            return Err(Error::DimensionMismatch("policy vs trusted structure".into()));
        }
        Ok(())
    }

    /// Trusted occupancy recursion through the supplied kernel source.
    /// `kernel(layer)` provides the flow table used between `layer` and
    /// `layer + 1`; the trusted sets gate the flow in both cases. Returns the
    /// state-action masses and the pre-policy state masses per layer. The
    /// probability table may be an arbitrary nonnegative tensor (the solver
    /// and derivative checks evaluate the multilinear extension off the
    /// simplex).
    fn gated_forward(
        &self,
        probs: &Array3<f64>,
        upto_layer: usize,
        kernel: impl Fn(usize) -> Result<Array3<f64>>,
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
                let p = kernel(layer)?;
                let set = self.require_set(layer + 1)?;
                let mut next = Array1::<f64>::zeros(s_n);
                for st in 0..s_n {
                    for ac in 0..a_n {
                        let m = mass[(layer, st, ac)];
                        if m == 0.0 {
                            continue;
                        }
                        for ns in 0..s_n {
                            if set[(st, ac, ns)] {
                                next[ns] += m * p[(st, ac, ns)];
                            }
                        }
                    }
                }
                state_mass = next;
            }
        }
        Ok((mass, states))
    }

    /// Raw-table trusted forward pass through the layer estimates; also
    /// returns per-layer pre-policy state masses (needed by gradients).
    pub(crate) fn forward_masses(
        &self,
        probs: &Array3<f64>,
        upto_layer: usize,
    ) -> Result<(Array3<f64>, Array2<f64>)> {
        self.gated_forward(probs, upto_layer, |layer| {
            Ok(self.require_estimate(layer)?.p_hat.clone())
        })
    }

    /// Trusted occupancy of `policy` through the epoch's layer estimates,
    /// for layers `0..=upto_layer`. Layer totals are non-increasing and at
    /// most 1.
    pub fn trusted_occupancy(&self, policy: &Policy, upto_layer: usize) -> Result<OccupancyTensor> {
        self.check_policy(policy)?;
        let (mass, _) = self.forward_masses(policy.probs(), upto_layer)?;
        Ok(OccupancyTensor { mass })
    }

    /// Same recursion with the ground-truth kernels but identical trusted
    /// sets. Analysis and test use only.
    pub fn true_observable_occupancy(
        &self,
        truth: &TabularMdp,
        policy: &Policy,
        upto_layer: usize,
    ) -> Result<OccupancyTensor> {
        if truth.dims() != &self.dims {
            return Err(Error::DimensionMismatch("truth vs trusted structure".into()));
        }
        self.check_policy(policy)?;
        let (mass, _) =
            self.gated_forward(policy.probs(), upto_layer, |layer| Ok(truth.kernel(layer).to_owned()))?;
        Ok(OccupancyTensor { mass })
    }

    /// Membership table for arriving layer `layer + 1`: keeps `(s, a, s')`
    /// iff the estimated flow of the executed policy reaches `1/zeta`
    /// (inclusive threshold).
    pub fn build_trusted_set(&self, executed_policy: &Policy, layer: usize) -> Result<Array3<bool>> {
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
        let mut set = Array3::from_elem((s_n, a_n, s_n), false);
        for st in 0..s_n {
            for ac in 0..a_n {
                let m = occ.mass[(layer, st, ac)];
                for ns in 0..s_n {
                    set[(st, ac, ns)] = m * est.p_hat[(st, ac, ns)] >= threshold;
                }
            }
        }
        Ok(set)
    }

    /// A policy whose trusted occupancies are the exact `lambda`-mixture of
    /// those of `pi1` and `pi2` at every layer up to `upto_layer`, built
    /// layer by layer; rows with no mixed mass fall back to uniform. Layers
    /// beyond `upto_layer` blend the two policies entrywise.
    pub fn mixture_policy(
        &self,
        pi1: &Policy,
        pi2: &Policy,
        lambda: f64,
        upto_layer: usize,
    ) -> Result<Policy> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::OutOfRange(format!("lambda {lambda} outside [0,1]")));
        }
        self.check_policy(pi1)?;
        self.check_policy(pi2)?;
        let d1 = self.trusted_occupancy(pi1, upto_layer)?;
        let d2 = self.trusted_occupancy(pi2, upto_layer)?;
        let (h, s_n, a_n) = (self.dims.horizon, self.dims.num_states, self.dims.num_actions);
        let mut probs = Array3::zeros((h, s_n, a_n));
        for layer in 0..h {
            for st in 0..s_n {
                if layer <= upto_layer {
                    let mut row = Array1::<f64>::zeros(a_n);
                    let mut den = 0.0;
                    for ac in 0..a_n {
                        let num =
                            lambda * d1.mass[(layer, st, ac)] + (1.0 - lambda) * d2.mass[(layer, st, ac)];
                        row[ac] = num;
                        den += num;
                    }
                    if den > 0.0 {
                        for ac in 0..a_n {
                            probs[(layer, st, ac)] = row[ac] / den;
                        }
                    } else {
                        for ac in 0..a_n {
                            probs[(layer, st, ac)] = 1.0 / a_n as f64;
                        }
                    }
                } else {
                    for ac in 0..a_n {
                        probs[(layer, st, ac)] = lambda * pi1.probs()[(layer, st, ac)]
                            + (1.0 - lambda) * pi2.probs()[(layer, st, ac)];
                    }
                }
            }
        }
        Policy::new(probs)
    }

    /// Stitches the per-layer estimates into the epoch's aggregated model.
    /// Requires every layer to have been estimated.
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
        Ok(AggregatedModel {
            epoch: self.epoch,
            model: TabularMdp::new(self.dims, transitions, rewards)?,
        })
    }

    /// Number of kept triples per arriving layer (present sets only).
    pub fn trusted_set_sizes(&self) -> Vec<usize> {
        self.trusted_sets
            .iter()
            .map(|s| s.as_ref().map_or(0, |set| set.iter().filter(|&&b| b).count()))
            .collect()
    }
}

/// Per-layer stitching of each segment's layer estimate; behaves as a
/// tabular MDP.
#[derive(Debug, Clone)]
pub struct AggregatedModel {
    epoch: usize,
    model: TabularMdp,
}

impl AggregatedModel {
    /// Epoch-zero initialization: uniform transitions, zero rewards.
    pub fn uninformative(dims: Dims) -> Self {
        Self { epoch: 0, model: TabularMdp::uniform_uninformative(dims) }
    }

    pub fn from_model(epoch: usize, model: TabularMdp) -> Self {
        Self { epoch, model }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn as_mdp(&self) -> &TabularMdp {
        &self.model
    }
}

/// Occupancy under the aggregated estimated model, untruncated.
pub fn estimated_occupancy(model: &AggregatedModel, policy: &Policy) -> Result<OccupancyTensor> {
    occupancy_forward(model.as_mdp(), policy)
}
