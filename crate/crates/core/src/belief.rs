//! Finite-POMDP representation, exact Bayesian belief updates and divergences.
//!
//! Beliefs are stored in linear space and renormalized after every update.
//! The filter is split into a prediction step through a [`Transition`] model
//! and a conditioning step on a per-state observation likelihood, so callers
//! with structured dynamics (deterministic grids) never materialize a dense
//! `|S| x |A| x |S|` table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|sum - 1|` for a stored probability vector.
pub const PROB_TOLERANCE: f64 = 1e-9;
/// Inputs whose sum is within this distance of 1 are renormalized on construction.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error("empty probability vector")]
    Empty,
    #[error("probability vector sums to {sum}, expected 1")]
    InvalidSum { sum: f64 },
    #[error("entry {index} is {value}; probabilities must be finite and non-negative")]
    InvalidEntry { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("action {action} out of range for {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("likelihood entry {index} is {value}; likelihoods must be finite and non-negative")]
    InvalidLikelihood { index: usize, value: f64 },
    #[error("invalid POMDP spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, BeliefError>;

fn check_distribution(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(BeliefError::Empty);
    }
    let mut sum = 0.0;
    for (index, &value) in probs.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(BeliefError::InvalidEntry { index, value });
        }
        sum += value;
    }
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(BeliefError::InvalidSum { sum });
    }
    Ok(sum)
}

/// Probability vector over a finite state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteBelief {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DiscreteBelief {
    type Error = BeliefError;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<DiscreteBelief> for Vec<f64> {
    fn from(value: DiscreteBelief) -> Self {
        value.probs
    }
}

impl DiscreteBelief {
    /// Validates `probs`; sums within [`RENORMALIZE_TOLERANCE`] of 1 are renormalized.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        let sum = check_distribution(&probs)?;
        if (sum - 1.0).abs() > 0.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize) -> Self {
        assert!(num_states > 0, "belief over an empty state space");
        Self {
            probs: vec![1.0 / num_states as f64; num_states],
        }
    }

    pub fn delta(num_states: usize, state: usize) -> Self {
        assert!(state < num_states, "state {state} out of range");
        let mut probs = vec![0.0; num_states];
        probs[state] = 1.0;
        Self { probs }
    }

    /// Normalizes non-negative weights. Returns `None` when their total mass is zero.
    pub fn from_weights(mut weights: Vec<f64>) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Some(Self { probs: weights })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, state: usize) -> f64 {
        self.probs[state]
    }

    /// Most probable state, ties broken by the lowest index.
    pub fn map_state(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Prediction step of the filter: pushes a belief through `p_dyn(. | s, a)`.
pub trait Transition {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Returns `sum_s p_dyn(s' | s, action) * probs[s]` for every `s'`.
    fn propagate(&self, probs: &[f64], action: usize) -> Vec<f64>;
}

/// Static-state model: every action leaves the state unchanged.
#[derive(Debug, Clone, Copy)]
pub struct StaticStates {
    pub num_states: usize,
    pub num_actions: usize,
}

impl Transition for StaticStates {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn propagate(&self, probs: &[f64], _action: usize) -> Vec<f64> {
        probs.to_vec()
    }
}

/// Finite POMDP with dense tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PomdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub observations: Vec<String>,
    pub p_init: Vec<f64>,
    /// `p_dyn[s][a][s']`
    pub p_dyn: Vec<Vec<Vec<f64>>>,
    /// `p_obs[s][o]`
    pub p_obs: Vec<Vec<f64>>,
    pub horizon: usize,
}

impl PomdpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BeliefError::InvalidSpec(msg));
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return bad("num_states, num_actions and horizon must be positive".into());
        }
        if self.observations.is_empty() {
            return bad("observation alphabet is empty".into());
        }
        let strict = |v: &[f64], what: String| -> Result<()> {
            let sum = check_distribution(v)
                .map_err(|e| BeliefError::InvalidSpec(format!("{what}: {e}")))?;
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(BeliefError::InvalidSpec(format!("{what} sums to {sum}")));
            }
            Ok(())
        };
        if self.p_init.len() != self.num_states {
            return bad(format!("p_init has {} entries", self.p_init.len()));
        }
        strict(&self.p_init, "p_init".into())?;
        if self.p_dyn.len() != self.num_states {
            return bad(format!("p_dyn has {} rows", self.p_dyn.len()));
        }
        for (s, per_action) in self.p_dyn.iter().enumerate() {
            if per_action.len() != self.num_actions {
                return bad(format!("p_dyn[{s}] has {} actions", per_action.len()));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != self.num_states {
                    return bad(format!("p_dyn[{s}][{a}] has {} entries", row.len()));
                }
                strict(row, format!("p_dyn[{s}][{a}]"))?;
            }
        }
        if self.p_obs.len() != self.num_states {
            return bad(format!("p_obs has {} rows", self.p_obs.len()));
        }
        for (s, row) in self.p_obs.iter().enumerate() {
            if row.len() != self.observations.len() {
                return bad(format!("p_obs[{s}] has {} entries", row.len()));
            }
            strict(row, format!("p_obs[{s}]"))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, SpecLoadError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn initial_belief(&self) -> DiscreteBelief {
        DiscreteBelief::new(self.p_init.clone()).expect("validated p_init")
    }

    /// Column `p_obs(o | .)` as a likelihood vector over states.
    pub fn observation_likelihood(&self, observation: usize) -> Vec<f64> {
        self.p_obs.iter().map(|row| row[observation]).collect()
    }
}

#[derive(Debug, Error)]
pub enum SpecLoadError {
    #[error("malformed spec JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] BeliefError),
}

impl Transition for PomdpSpec {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn propagate(&self, probs: &[f64], action: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        for (s, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (next, &q) in self.p_dyn[s][action].iter().enumerate() {
                out[next] += p * q;
            }
        }
        out
    }
}

/// What to do when an observation has zero likelihood on the whole predicted support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpossiblePolicy {
    /// Keep the predicted belief, ignoring the observation.
    Skip,
    /// Fall back to the uniform belief.
    ResetUniform,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Updated(DiscreteBelief),
    /// The observation is impossible under the predicted belief. Carries the
    /// predicted belief so callers can skip the observation.
    Impossible { predicted: DiscreteBelief },
}

impl UpdateOutcome {
    pub fn resolve(self, policy: ImpossiblePolicy) -> DiscreteBelief {
        match self {
            UpdateOutcome::Updated(b) => b,
            UpdateOutcome::Impossible { predicted } => match policy {
                ImpossiblePolicy::Skip => predicted,
                ImpossiblePolicy::ResetUniform => DiscreteBelief::uniform(predicted.len()),
            },
        }
    }

    pub fn is_impossible(&self) -> bool {
        matches!(self, UpdateOutcome::Impossible { .. })
    }
}

/// Prediction through the dynamics only.
pub fn predict<T: Transition + ?Sized>(
    belief: &DiscreteBelief,
    action: usize,
    model: &T,
) -> Result<DiscreteBelief> {
    if belief.len() != model.num_states() {
        return Err(BeliefError::DimensionMismatch {
            expected: model.num_states(),
            found: belief.len(),
        });
    }
    if action >= model.num_actions() {
        return Err(BeliefError::InvalidAction {
            action,
            num_actions: model.num_actions(),
        });
    }
    let out = model.propagate(belief.probs(), action);
    // renormalize to absorb rounding drift of the transition rows
    Ok(DiscreteBelief::from_weights(out).expect("transition preserves mass"))
}

/// Conditioning step: pointwise product with the likelihood and renormalization.
pub fn condition(belief: &DiscreteBelief, likelihood: &[f64]) -> Result<UpdateOutcome> {
    if likelihood.len() != belief.len() {
        return Err(BeliefError::DimensionMismatch {
            expected: belief.len(),
            found: likelihood.len(),
        });
    }
    for (index, &value) in likelihood.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(BeliefError::InvalidLikelihood { index, value });
        }
    }
    let posterior: Vec<f64> = belief
        .probs()
        .iter()
        .zip(likelihood)
        .map(|(p, l)| p * l)
        .collect();
    Ok(match DiscreteBelief::from_weights(posterior) {
        Some(b) => UpdateOutcome::Updated(b),
        None => UpdateOutcome::Impossible {
            predicted: belief.clone(),
        },
    })
}

/// One step of the recursive Bayes filter: optional prediction through the
/// dynamics for `action`, then conditioning on `likelihood`.
pub fn bayes_update<T: Transition + ?Sized>(
    belief: &DiscreteBelief,
    action: Option<usize>,
    likelihood: &[f64],
    model: &T,
) -> Result<UpdateOutcome> {
    let predicted = match action {
        Some(a) => predict(belief, a, model)?,
        None => {
            if belief.len() != model.num_states() {
                return Err(BeliefError::DimensionMismatch {
                    expected: model.num_states(),
                    found: belief.len(),
                });
            }
            belief.clone()
        }
    };
    condition(&predicted, likelihood)
}

/// `sum_s p(s) ln(p(s)/q(s))` with `0 ln(0/q) = 0`; `+inf` when `q(s) = 0 < p(s)`.
pub fn kl_divergence(p: &DiscreteBelief, q: &DiscreteBelief) -> Result<f64> {
    kl_divergence_slices(p.probs(), q.probs())
}

pub(crate) fn kl_divergence_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(BeliefError::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let mut total = 0.0;
    for (&ps, &qs) in p.iter().zip(q) {
        if ps == 0.0 {
            continue;
        }
        if qs == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += ps * (ps / qs).ln();
    }
    // rounding can push identical distributions a hair below zero
    Ok(total.max(0.0))
}

/// Isotropic Gaussian belief `N(mean, variance_scale * I)` around an encoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub variance_scale: f64,
}

impl GaussianBelief {
    pub fn new(mean: Vec<f64>, variance_scale: f64) -> Result<Self> {
        if !(variance_scale >= 0.0) || !variance_scale.is_finite() {
            return Err(BeliefError::InvalidEntry {
                index: 0,
                value: variance_scale,
            });
        }
        if let Some((index, &value)) = mean.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(BeliefError::InvalidEntry { index, value });
        }
        Ok(Self {
            mean,
            variance_scale,
        })
    }

    /// Point belief (`variance_scale = 0`) at the encoder output for a history.
    pub fn from_encoder<E: HistoryEncoder + ?Sized>(
        encoder: &E,
        observations: &[E::Observation],
        actions: &[E::Action],
        variance_scale: f64,
    ) -> Result<Self> {
        Self::new(encoder.encode(observations, actions), variance_scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Deterministic map from an observation/action history to a state vector.
pub trait HistoryEncoder {
    type Observation;
    type Action;

    fn encode(&self, observations: &[Self::Observation], actions: &[Self::Action]) -> Vec<f64>;
}

/// Zero-variance limit of the KL between two isotropic Gaussians: the
/// Euclidean distance between their means.
pub fn gaussian_kl_limit_distance(a: &GaussianBelief, b: &GaussianBelief) -> Result<f64> {
    euclidean_distance(&a.mean, &b.mean)
}

pub(crate) fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(BeliefError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect()
    }

    fn random_spec(rng: &mut ChaCha8Rng, states: usize, actions: usize, obs: usize) -> PomdpSpec {
        PomdpSpec {
            num_states: states,
            num_actions: actions,
            observations: (0..obs).map(|o| format!("o{o}")).collect(),
            p_init: random_distribution(rng, states),
            p_dyn: (0..states)
                .map(|_| (0..actions).map(|_| random_distribution(rng, states)).collect())
                .collect(),
            p_obs: (0..states).map(|_| random_distribution(rng, obs)).collect(),
            horizon: 4,
        }
    }

    /// Marginal of `p(s_t, o_{0:t} | a_{0:t-1})` over all state sequences.
    fn enumerate_posterior(spec: &PomdpSpec, obs: &[usize], actions: &[usize]) -> Vec<f64> {
        let n = spec.num_states;
        let t = obs.len();
        let mut marginal = vec![0.0; n];
        let total = n.pow(t as u32);
        for code in 0..total {
            let mut seq = Vec::with_capacity(t);
            let mut c = code;
            for _ in 0..t {
                seq.push(c % n);
                c /= n;
            }
            let mut p = spec.p_init[seq[0]] * spec.p_obs[seq[0]][obs[0]];
            for k in 1..t {
                p *= spec.p_dyn[seq[k - 1]][actions[k - 1]][seq[k]] * spec.p_obs[seq[k]][obs[k]];
            }
            marginal[seq[t - 1]] += p;
        }
        let z: f64 = marginal.iter().sum();
        marginal.into_iter().map(|m| m / z).collect()
    }

    #[test]
    fn delta_from_consistent_state() {
        let model = StaticStates { num_states: 4, num_actions: 1 };
        let out = bayes_update(&DiscreteBelief::uniform(4), None, &[1.0, 0.0, 0.0, 0.0], &model)
            .unwrap()
            .resolve(ImpossiblePolicy::Skip);
        assert_eq!(out.probs(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_likelihood_leaves_belief_unchanged() {
        let model = StaticStates { num_states: 3, num_actions: 1 };
        let prior = DiscreteBelief::new(vec![0.2, 0.5, 0.3]).unwrap();
        let out = bayes_update(&prior, None, &[0.4, 0.4, 0.4], &model)
            .unwrap()
            .resolve(ImpossiblePolicy::Skip);
        for (a, b) in out.probs().iter().zip(prior.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_shift_right() {
        // actions: 0 = left, 1 = right on a 3-state chain
        let shift = |s: usize, a: usize| -> usize {
            if a == 1 {
                (s + 1).min(2)
            } else {
                s.saturating_sub(1)
            }
        };
        let spec = PomdpSpec {
            num_states: 3,
            num_actions: 2,
            observations: vec!["x".into()],
            p_init: vec![1.0, 0.0, 0.0],
            p_dyn: (0..3)
                .map(|s| {
                    (0..2)
                        .map(|a| {
                            let mut row = vec![0.0; 3];
                            row[shift(s, a)] = 1.0;
                            row
                        })
                        .collect()
                })
                .collect(),
            p_obs: vec![vec![1.0]; 3],
            horizon: 3,
        };
        spec.validate().unwrap();
        let out = bayes_update(&DiscreteBelief::delta(3, 0), Some(1), &[0.5, 0.5, 0.5], &spec)
            .unwrap()
            .resolve(ImpossiblePolicy::Skip);
        assert_eq!(out.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn recursive_filter_matches_enumeration_six_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = random_spec(&mut rng, 6, 2, 3);
        let obs = [2, 0, 1];
        let actions = [1, 0];
        let mut b = bayes_update(&spec.initial_belief(), None, &spec.observation_likelihood(obs[0]), &spec)
            .unwrap()
            .resolve(ImpossiblePolicy::Skip);
        for t in 1..3 {
            b = bayes_update(&b, Some(actions[t - 1]), &spec.observation_likelihood(obs[t]), &spec)
                .unwrap()
                .resolve(ImpossiblePolicy::Skip);
        }
        let oracle = enumerate_posterior(&spec, &obs, &actions);
        for (x, y) in b.probs().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn impossible_observation_sentinel() {
        let model = StaticStates { num_states: 3, num_actions: 1 };
        let prior = DiscreteBelief::new(vec![0.5, 0.5, 0.0]).unwrap();
        let out = bayes_update(&prior, None, &[0.0, 0.0, 1.0], &model).unwrap();
        assert!(out.is_impossible());
        assert_eq!(out.clone().resolve(ImpossiblePolicy::Skip), prior);
        assert_eq!(out.resolve(ImpossiblePolicy::ResetUniform), DiscreteBelief::uniform(3));
    }

    #[test]
    fn input_belief_is_untouched() {
        let model = StaticStates { num_states: 2, num_actions: 1 };
        let prior = DiscreteBelief::new(vec![0.3, 0.7]).unwrap();
        let copy = prior.clone();
        let _ = bayes_update(&prior, Some(0), &[1.0, 0.1], &model).unwrap();
        assert_eq!(prior, copy);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(DiscreteBelief::new(vec![]), Err(BeliefError::Empty)));
        assert!(matches!(
            DiscreteBelief::new(vec![0.5, 0.4]),
            Err(BeliefError::InvalidSum { .. })
        ));
        assert!(matches!(
            DiscreteBelief::new(vec![1.5, -0.5]),
            Err(BeliefError::InvalidEntry { .. })
        ));
        let nearly = DiscreteBelief::new(vec![0.5, 0.5 + 5e-7]).unwrap();
        assert!((nearly.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let model = StaticStates { num_states: 2, num_actions: 1 };
        assert!(matches!(
            bayes_update(&DiscreteBelief::uniform(2), Some(3), &[1.0, 1.0], &model),
            Err(BeliefError::InvalidAction { .. })
        ));
        assert!(matches!(
            bayes_update(&DiscreteBelief::uniform(2), None, &[1.0, -1.0], &model),
            Err(BeliefError::InvalidLikelihood { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let p = DiscreteBelief::new(vec![0.5, 0.5]).unwrap();
        let q = DiscreteBelief::new(vec![0.9, 0.1]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-15);
        let a = DiscreteBelief::delta(2, 0);
        let b = DiscreteBelief::delta(2, 1);
        assert_eq!(kl_divergence(&a, &b).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&a, &DiscreteBelief::uniform(3)).is_err());
    }

    #[test]
    fn gaussian_limit_distance_examples() {
        let a = GaussianBelief::new(vec![0.0, 0.0], 0.0).unwrap();
        let b = GaussianBelief::new(vec![3.0, 4.0], 0.0).unwrap();
        assert_eq!(gaussian_kl_limit_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(gaussian_kl_limit_distance(&a, &b).unwrap(), 5.0);
        let c = GaussianBelief::new(vec![1.0], 0.0).unwrap();
        assert!(gaussian_kl_limit_distance(&a, &c).is_err());
        assert!(GaussianBelief::new(vec![0.0], -1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut sum_sq = 0.0;
        for i in 0..8 {
            let d = x[i] - y[i];
            sum_sq += d * d;
        }
        let got = gaussian_kl_limit_distance(
            &GaussianBelief::new(x, 0.0).unwrap(),
            &GaussianBelief::new(y, 0.0).unwrap(),
        )
        .unwrap();
        assert!((got - sum_sq.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spec_json_round_trip_and_schema() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = random_spec(&mut rng, 3, 2, 2);
        let text = spec.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["num_states", "num_actions", "observations", "p_init", "p_dyn", "p_obs", "horizon"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(PomdpSpec::from_json(&text).unwrap(), spec);
        let broken = text.replace("\"horizon\": 4", "\"horizon\": 0");
        assert!(PomdpSpec::from_json(&broken).is_err());
    }

    proptest! {
        #[test]
        fn kl_nonnegative_zero_iff_equal(seed in 0u64..10_000, n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = DiscreteBelief::new(random_distribution(&mut rng, n)).unwrap();
            let q = DiscreteBelief::new(random_distribution(&mut rng, n)).unwrap();
            let d = kl_divergence(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            let differs = p.probs().iter().zip(q.probs()).any(|(a, b)| (a - b).abs() > 1e-12);
            prop_assert_eq!(d == 0.0, !differs);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn update_stays_normalized(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, n, 2, 3);
            let mut b = spec.initial_belief();
            for t in 0..4 {
                let o = rng.random_range(0..3);
                let a = if t == 0 { None } else { Some(rng.random_range(0..2)) };
                b = bayes_update(&b, a, &spec.observation_likelihood(o), &spec).unwrap().resolve(ImpossiblePolicy::Skip);
                prop_assert!((b.probs().iter().sum::<f64>() - 1.0).abs() < PROB_TOLERANCE);
            }
        }

        #[test]
        fn static_updates_commute(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = StaticStates { num_states: n, num_actions: 1 };
            let prior = DiscreteBelief::new(random_distribution(&mut rng, n)).unwrap();
            let likes: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| rng.random::<f64>() + 0.01).collect()).collect();
            let run = |order: &[usize]| {
                order.iter().fold(prior.clone(), |b, &i| {
                    bayes_update(&b, None, &likes[i], &model).unwrap().resolve(ImpossiblePolicy::Skip)
                })
            };
            let forward = run(&[0, 1, 2, 3]);
            let backward = run(&[3, 1, 0, 2]);
            for (x, y) in forward.probs().iter().zip(backward.probs()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn gaussian_distance_is_a_metric(seed in 0u64..10_000, dim in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut point = || GaussianBelief::new((0..dim).map(|_| rng.random_range(-10.0..10.0)).collect(), 0.0).unwrap();
            let (a, b, c) = (point(), point(), point());
            let ab = gaussian_kl_limit_distance(&a, &b).unwrap();
            let ba = gaussian_kl_limit_distance(&b, &a).unwrap();
            let bc = gaussian_kl_limit_distance(&b, &c).unwrap();
            let ac = gaussian_kl_limit_distance(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}
