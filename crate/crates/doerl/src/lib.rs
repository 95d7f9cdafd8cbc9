//! Doubly oracle-efficient episodic reinforcement learning at desk scale.
//!
//! The crate provides exact tabular and linear MDP machinery (simulation,
//! occupancy measures, backward induction), offline statistical estimation
//! oracles over finite model classes, trusted transition sets and trusted
//! occupancy measures, log-barrier and log-determinant policy optimization,
//! the batched epoch-schedule driver with oracle-call accounting, and a small
//! experiment harness behind the `doerl` CLI.
//!
//! See the `book/` guide for a narrative walkthrough; every code block there
//! runs as a doc-test of this crate.

pub mod error;
pub mod estimate;
pub mod linear;
pub mod mdp;
pub mod trusted;

pub use error::{Error, Result};
pub use mdp::{
    enumerate_trajectories, occupancy_forward, optimal_policy_plan, regret_of_policy,
    sample_trajectory, value_backward, Dims, OccupancyTensor, Policy, RewardNoiseModel, Step,
    TabularMdp, Trajectory, TrajectorySkeleton, ValueBackward, ENUMERATION_CAP, SIMPLEX_TOL,
};
