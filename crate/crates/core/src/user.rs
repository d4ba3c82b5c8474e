//! Simulated biased users: a belief update paired with a Boltzmann policy.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{condition, predict, DiscreteBelief, ImpossiblePolicy};
use crate::env::delay_track::{TrackAction, TrackView};
use crate::env::row_reveal::{softmax_belief, ClassPixelModel};
use crate::env::{GridNavEnv, LanderAction, ObjectCategory, ObjectId};
use crate::policy::SoftQTable;

#[derive(Debug, Error, PartialEq)]
pub enum UserError {
    #[error("trust weight {value} for object {index} is outside [0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} parameters, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, UserError>;

/// How a nav parameter vector maps onto per-object trust weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaLayout {
    /// One scalar for every unique-unknown object; all other objects have weight 1.
    UnknownCategory,
    /// One scalar per category, ordered unique-unknown, duplicated-known, unique-known.
    PerCategory,
    /// One scalar per object.
    PerObject,
}

impl ThetaLayout {
    pub fn dim(self, env: &GridNavEnv) -> usize {
        match self {
            ThetaLayout::UnknownCategory => 1,
            ThetaLayout::PerCategory => 3,
            ThetaLayout::PerObject => env.num_objects(),
        }
    }

    /// Index of the parameter controlling `object`'s weight, if any.
    pub fn parameter_of(self, env: &GridNavEnv, object: ObjectId) -> Option<usize> {
        let category = env.object(object).category;
        match self {
            ThetaLayout::UnknownCategory => (category == ObjectCategory::UniqueUnknown).then_some(0),
            ThetaLayout::PerCategory => Some(match category {
                ObjectCategory::UniqueUnknown => 0,
                ObjectCategory::DuplicatedKnown => 1,
                ObjectCategory::UniqueKnown => 2,
            }),
            ThetaLayout::PerObject => Some(object.0),
        }
    }

    pub fn object_weights(self, env: &GridNavEnv, theta: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim(env);
        if theta.len() != dim {
            return Err(UserError::DimensionMismatch {
                expected: dim,
                found: theta.len(),
            });
        }
        Ok((0..env.num_objects())
            .map(|o| match self.parameter_of(env, ObjectId(o)) {
                Some(i) => theta[i],
                None => 1.0,
            })
            .collect())
    }
}

/// Nav user with per-object trust weights. A singleton observation `o` has
/// likelihood `w_o / Z(s)` in states that see `o`, where `Z(s)` sums the
/// weights of everything visible from `s`. States whose visible objects all
/// have zero weight look empty to the user.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedObsUser {
    weights: Vec<f64>,
    normalizers: Vec<f64>,
    max_items: usize,
}

impl WeightedObsUser {
    pub fn new(env: &GridNavEnv, weights: Vec<f64>, max_items: usize) -> Result<Self> {
        if weights.len() != env.num_objects() {
            return Err(UserError::DimensionMismatch {
                expected: env.num_objects(),
                found: weights.len(),
            });
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(0.0..=1.0).contains(*w))
        {
            return Err(UserError::WeightOutOfRange { index, value });
        }
        if max_items == 0 {
            return Err(UserError::InvalidParameter("max_items must be positive".into()));
        }
        let normalizers = (0..env.num_states())
            .map(|s| env.full_observe(s).iter().map(|o| weights[o.0]).sum())
            .collect();
        Ok(Self {
            weights,
            normalizers,
            max_items,
        })
    }

    pub fn unbiased(env: &GridNavEnv, max_items: usize) -> Self {
        Self::new(env, vec![1.0; env.num_objects()], max_items).expect("unit weights are valid")
    }

    pub fn from_theta(env: &GridNavEnv, layout: ThetaLayout, theta: &[f64], max_items: usize) -> Result<Self> {
        Self::new(env, layout.object_weights(env, theta)?, max_items)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalizer(&self, state: usize) -> f64 {
        self.normalizers[state]
    }

    pub fn max_items(&self) -> usize {
        self.max_items
    }

    /// `p_theta(o | s)` for a singleton or the empty observation.
    pub fn singleton_likelihood(&self, env: &GridNavEnv, observation: Option<ObjectId>) -> Vec<f64> {
        let n = env.num_states();
        match observation {
            None => self
                .normalizers
                .iter()
                .map(|&z| if z == 0.0 { 1.0 } else { 0.0 })
                .collect(),
            Some(o) => {
                let mut out = vec![0.0; n];
                let w = self.weights[o.0];
                if w > 0.0 {
                    for &s in env.seen_from(o) {
                        out[s] = w / self.normalizers[s];
                    }
                }
                out
            }
        }
    }

    /// Likelihood of a shown object set, `None` when the user ignores it.
    pub fn likelihood(&self, env: &GridNavEnv, observation: &[ObjectId]) -> Option<Vec<f64>> {
        match observation.len() {
            0 => Some(self.singleton_likelihood(env, None)),
            1 => Some(self.singleton_likelihood(env, Some(observation[0]))),
            k if k <= self.max_items => {
                let mut set = observation.to_vec();
                set.sort();
                set.dedup();
                Some(env.full_set_likelihood(&set))
            }
            _ => None,
        }
    }

    /// Conditioning step only; ignored or impossible observations leave the belief unchanged.
    pub fn condition(&self, env: &GridNavEnv, predicted: &DiscreteBelief, observation: &[ObjectId]) -> DiscreteBelief {
        match self.likelihood(env, observation) {
            None => predicted.clone(),
            Some(l) => condition(predicted, &l)
                .expect("likelihood matches the state space")
                .resolve(ImpossiblePolicy::Skip),
        }
    }

    /// Full user update: predict through the user's remembered action, then condition.
    pub fn update(
        &self,
        env: &GridNavEnv,
        belief: &DiscreteBelief,
        action: Option<usize>,
        observation: &[ObjectId],
    ) -> DiscreteBelief {
        let predicted = match action {
            Some(a) => predict(belief, a, env).expect("action valid for env"),
            None => belief.clone(),
        };
        self.condition(env, &predicted, observation)
    }
}

/// Goal-conditioned Boltzmann policy `pi(a | s) ~ exp(beta Q(s, a))`.
#[derive(Debug, Clone)]
pub struct BoltzmannPolicy {
    table: Arc<SoftQTable>,
    beta: f64,
    probs: Vec<f64>,
}

impl BoltzmannPolicy {
    pub fn new(table: Arc<SoftQTable>, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(UserError::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        let probs = (0..table.num_states())
            .flat_map(|s| table.boltzmann(s, beta))
            .collect();
        Ok(Self { table, beta, probs })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn table(&self) -> &SoftQTable {
        &self.table
    }

    pub fn num_actions(&self) -> usize {
        self.table.num_actions()
    }

    pub fn state_probs(&self, state: usize) -> &[f64] {
        let na = self.table.num_actions();
        &self.probs[state * na..(state + 1) * na]
    }

    /// `sum_s pi(a | s) b(s)` for every action.
    pub fn marginal(&self, belief: &DiscreteBelief) -> Vec<f64> {
        let na = self.table.num_actions();
        let mut out = vec![0.0; na];
        for (s, &p) in belief.probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, q) in out.iter_mut().zip(self.state_probs(s)) {
                *o += p * q;
            }
        }
        out
    }
}

/// Samples an action from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(probs)
        .expect("action distribution has positive mass")
        .sample(rng)
}

/// Acts rationally with respect to a discrete belief: `a ~ sum_s pi(a | s) b(s)`.
pub fn user_act<R: Rng + ?Sized>(policy: &BoltzmannPolicy, belief: &DiscreteBelief, rng: &mut R) -> usize {
    sample_index(&policy.marginal(belief), rng)
}

/// Bandwidth-limited classifier over a row-revealed image. Shown observations
/// with more than `max_items` rows are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct RowUser {
    max_items: usize,
    log_weights: Vec<f64>,
}

impl RowUser {
    pub fn new(num_classes: usize, max_items: usize) -> Self {
        Self {
            max_items: max_items.max(1),
            log_weights: vec![0.0; num_classes],
        }
    }

    pub fn observe(&mut self, model: &ClassPixelModel, rows: &[(usize, &[bool])]) {
        if rows.len() > self.max_items {
            return;
        }
        for &(r, pixels) in rows {
            for (k, lw) in self.log_weights.iter_mut().enumerate() {
                *lw += model.row_log_likelihood(k, r, pixels);
            }
        }
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn belief(&self) -> DiscreteBelief {
        softmax_belief(&self.log_weights)
    }

    /// Current label guess: MAP class, lowest index on ties. Weights within a
    /// relative 1e-9 of the maximum count as tied, so the guess does not depend
    /// on the order rows were revealed in.
    pub fn guess(&self) -> usize {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-9 * (1.0 + max.abs());
        self.log_weights.iter().position(|&w| w >= max - tol).unwrap_or(0)
    }
}

/// Lane-keeping driver that treats every view as current. It picks the steering
/// whose new heading best carries the car to the road center `preview` segments
/// ahead: `score(a) = -beta * (offset[preview] - preview * (h + a * delta))^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayBlindDriver {
    pub beta: f64,
    pub preview: usize,
}

impl Default for DelayBlindDriver {
    fn default() -> Self {
        Self { beta: 20.0, preview: 4 }
    }
}

impl DelayBlindDriver {
    pub fn action_probs(&self, view: &TrackView, steer_delta: f64) -> [f64; 3] {
        let k = self.preview.min(view.offsets.len() - 1).max(1);
        let target = view.offsets[k];
        let scores = TrackAction::ALL.map(|a| {
            let e = target - k as f64 * (view.heading + a.steer() * steer_delta);
            -self.beta * e * e
        });
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = scores.map(|s| (s - m).exp());
        let z: f64 = w.iter().sum();
        w.map(|x| x / z)
    }

    pub fn act<R: Rng + ?Sized>(&self, view: &TrackView, steer_delta: f64, rng: &mut R) -> TrackAction {
        TrackAction::ALL[sample_index(&self.action_probs(view, steer_delta), rng)]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic percept map `s_hat = -pi + 2 pi sigmoid(theta0 + theta1 o)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortedPerceptUser {
    pub theta0: f64,
    pub theta1: f64,
}

impl DistortedPerceptUser {
    /// Undistorted reference: slope 1 at the origin.
    pub const IDENTITY_SLOPE_THETA1: f64 = 2.0 / PI;

    pub fn identity() -> Self {
        Self {
            theta0: 0.0,
            theta1: Self::IDENTITY_SLOPE_THETA1,
        }
    }

    pub fn percept(&self, observation: f64) -> f64 {
        -PI + 2.0 * PI * sigmoid(self.theta0 + self.theta1 * observation)
    }
}

/// `p(fire-right) = sigmoid(kappa * s_hat)`; no-op is never chosen.
pub fn lander_fire_right_prob(percept: f64, kappa: f64) -> f64 {
    sigmoid(kappa * percept)
}

pub fn lander_user_policy<R: Rng + ?Sized>(percept: f64, kappa: f64, rng: &mut R) -> LanderAction {
    if rng.random::<f64>() < lander_fire_right_prob(percept, kappa) {
        LanderAction::FireRight
    } else {
        LanderAction::FireLeft
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
