//! Observation synthesis: pick the observation that moves the modeled user
//! belief closest to the assistant's own belief.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{euclidean_distance, kl_divergence_slices, DiscreteBelief};
use crate::env::delay_track::{CarState, DelayTrackEnv, TrackAction, TrackObservation};
use crate::env::row_reveal::{softmax_belief, ClassPixelModel};
use crate::env::{GridNavEnv, ObjectId};
use crate::user::WeightedObsUser;

#[derive(Debug, Error, PartialEq)]
pub enum AssistError {
    #[error("no candidate observations to choose from")]
    NoCandidates,
    #[error("action log has {available} entries but the delay spans {delay}")]
    ShortActionLog { available: usize, delay: usize },
    #[error("percept map with zero slope cannot be inverted")]
    NonInvertible,
    #[error("belief dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, AssistError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObservation<O> {
    pub payload: O,
    /// KL divergence (or distance) reached by the chosen observation.
    pub objective_value: f64,
    pub candidate_count: usize,
}

/// The assistant's model of how the user conditions on a shown observation.
pub trait UserBeliefModel: Sync {
    type Observation: Clone + Send + Sync;

    /// Posterior after showing `observation` to a user whose predicted belief is
    /// `predicted`. Ignored observations return `predicted` unchanged.
    fn condition(&self, predicted: &DiscreteBelief, observation: &Self::Observation) -> DiscreteBelief;

    /// Real-valued embedding of a state, used to break all-infinite ties.
    fn embed(&self, state: usize) -> Vec<f64>;
}

/// Per-candidate KL divergence `KL(assistant || updated user)`.
pub fn score_candidates<M: UserBeliefModel>(
    assistant: &DiscreteBelief,
    model: &M,
    user_predicted: &DiscreteBelief,
    candidates: &[M::Observation],
) -> Result<Vec<(f64, DiscreteBelief)>> {
    if assistant.len() != user_predicted.len() {
        return Err(AssistError::DimensionMismatch(assistant.len(), user_predicted.len()));
    }
    Ok(candidates
        .par_iter()
        .map(|c| {
            let updated = model.condition(user_predicted, c);
            let kl = kl_divergence_slices(assistant.probs(), updated.probs()).expect("same dimension");
            (kl, updated)
        })
        .collect())
}

/// Greedy one-step synthesis over an explicit candidate list. Lowest KL wins,
/// earliest candidate on ties. If every candidate has infinite KL, the
/// candidate whose updated MAP state embeds closest to the assistant's MAP
/// state wins.
pub fn synthesize_enumerative<M: UserBeliefModel>(
    assistant: &DiscreteBelief,
    model: &M,
    user_predicted: &DiscreteBelief,
    candidates: &[M::Observation],
) -> Result<SyntheticObservation<M::Observation>> {
    if candidates.is_empty() {
        return Err(AssistError::NoCandidates);
    }
    let scored = score_candidates(assistant, model, user_predicted, candidates)?;
    let mut best: Option<usize> = None;
    for (i, (kl, _)) in scored.iter().enumerate() {
        if kl.is_finite() && best.is_none_or(|b| *kl < scored[b].0) {
            best = Some(i);
        }
    }
    let chosen = match best {
        Some(i) => i,
        None => {
            let target = model.embed(assistant.map_state());
            let mut best_i = 0;
            let mut best_d = f64::INFINITY;
            for (i, (_, updated)) in scored.iter().enumerate() {
                let d = euclidean_distance(&target, &model.embed(updated.map_state())).expect("fixed embedding size");
                if d < best_d {
                    best_d = d;
                    best_i = i;
                }
            }
            best_i
        }
    };
    Ok(SyntheticObservation {
        payload: candidates[chosen].clone(),
        objective_value: scored[chosen].0,
        candidate_count: candidates.len(),
    })
}

/// Nav user model as seen by the assistant. Candidates are singleton object
/// mentions, `None` meaning "nothing in view".
pub struct NavUserView<'a> {
    pub env: &'a GridNavEnv,
    pub user: &'a WeightedObsUser,
}

impl UserBeliefModel for NavUserView<'_> {
    type Observation = Option<ObjectId>;

    fn condition(&self, predicted: &DiscreteBelief, observation: &Option<ObjectId>) -> DiscreteBelief {
        let shown: Vec<ObjectId> = observation.iter().copied().collect();
        self.user.condition(self.env, predicted, &shown)
    }

    fn embed(&self, state: usize) -> Vec<f64> {
        let (x, y, h) = self.env.decode(state);
        let (dx, dy) = h.delta();
        vec![x as f64, y as f64, dx as f64, dy as f64]
    }
}

/// Which singleton mentions the nav assistant may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavCandidates {
    /// Objects visible from the true pose ("nothing" if none are).
    #[default]
    Visible,
    /// Every object plus "nothing".
    AllSingletons,
}

impl NavCandidates {
    pub fn list(self, env: &GridNavEnv, true_state: usize) -> Vec<Option<ObjectId>> {
        match self {
            NavCandidates::Visible => {
                let vis = env.full_observe(true_state);
                if vis.is_empty() {
                    vec![None]
                } else {
                    vis.iter().copied().map(Some).collect()
                }
            }
            NavCandidates::AllSingletons => std::iter::once(None)
                .chain((0..env.num_objects()).map(|o| Some(ObjectId(o))))
                .collect(),
        }
    }
}

/// Picks the unrevealed row that brings the user's class posterior closest to
/// the assistant's. `user_log_weights` are the user's unnormalized class log
/// posteriors so far.
pub fn synthesize_row(
    assistant: &DiscreteBelief,
    user_log_weights: &[f64],
    unrevealed: &[usize],
    model: &ClassPixelModel,
    image: &[Vec<bool>],
) -> Result<SyntheticObservation<usize>> {
    if unrevealed.is_empty() {
        return Err(AssistError::NoCandidates);
    }
    if assistant.len() != user_log_weights.len() {
        return Err(AssistError::DimensionMismatch(assistant.len(), user_log_weights.len()));
    }
    let mut best = (unrevealed[0], f64::INFINITY);
    for &r in unrevealed {
        let logw: Vec<f64> = user_log_weights
            .iter()
            .enumerate()
            .map(|(k, lw)| lw + model.row_log_likelihood(k, r, &image[r]))
            .collect();
        let kl = kl_divergence_slices(assistant.probs(), softmax_belief(&logw).probs()).expect("same dimension");
        if kl < best.1 {
            best = (r, kl);
        }
    }
    Ok(SyntheticObservation {
        payload: best.0,
        objective_value: best.1,
        candidate_count: unrevealed.len(),
    })
}

/// Known dynamics used to roll a stale observation forward.
pub trait ForwardModel {
    type State;
    type Action;
    type Observation: Clone;

    /// State estimate from an observation taken at `time`.
    fn decode(&self, observation: &Self::Observation, time: usize) -> Self::State;
    /// Noise-free transition.
    fn advance(&self, state: &Self::State, action: &Self::Action) -> Self::State;
    /// Undelayed observation of a state.
    fn render(&self, state: &Self::State) -> Self::Observation;
}

impl ForwardModel for DelayTrackEnv {
    type State = CarState;
    type Action = TrackAction;
    type Observation = TrackObservation;

    fn decode(&self, observation: &TrackObservation, time: usize) -> CarState {
        DelayTrackEnv::decode(self, &observation.view, time)
    }

    fn advance(&self, state: &CarState, action: &TrackAction) -> CarState {
        self.transition(state, *action, 0.0)
    }

    fn render(&self, state: &CarState) -> TrackObservation {
        TrackObservation {
            view: DelayTrackEnv::render(self, state),
            delayed: false,
        }
    }
}

/// Replaces an observation that is `delay` steps stale with the prediction of
/// the current one. `fresh_time` is when the stale observation was taken and
/// `actions` holds the actions logged since then, oldest first.
pub fn forward_predict<M: ForwardModel>(
    model: &M,
    observation: &M::Observation,
    fresh_time: usize,
    actions: &[M::Action],
    delay: usize,
) -> Result<SyntheticObservation<M::Observation>> {
    if delay == 0 {
        return Ok(SyntheticObservation {
            payload: observation.clone(),
            objective_value: 0.0,
            candidate_count: 1,
        });
    }
    if actions.len() < delay {
        return Err(AssistError::ShortActionLog {
            available: actions.len(),
            delay,
        });
    }
    let mut state = model.decode(observation, fresh_time);
    for a in &actions[actions.len() - delay..] {
        state = model.advance(&state, a);
    }
    Ok(SyntheticObservation {
        payload: model.render(&state),
        objective_value: 0.0,
        candidate_count: 1,
    })
}

/// Tracks the delay span and action log of a delayed feed.
#[derive(Debug, Clone, Default)]
pub struct DelayTracker {
    fresh_time: usize,
    actions: Vec<TrackAction>,
}

impl DelayTracker {
    /// Assistant output for the observation emitted at time `t`.
    pub fn assist(&mut self, env: &DelayTrackEnv, t: usize, observation: &TrackObservation) -> TrackObservation {
        if !observation.delayed {
            self.fresh_time = t;
        }
        let delay = t - self.fresh_time;
        forward_predict(env, observation, self.fresh_time, &self.actions[..t], delay)
            .expect("every step logs an action")
            .payload
    }

    pub fn record(&mut self, action: TrackAction) {
        self.actions.push(action);
    }
}

/// `o_tilde = (logit((o + pi) / 2 pi) - theta0) / theta1`, clamped to `[-pi, pi]`.
/// Shown to a user with percept map `theta`, it is perceived as `o`.
pub fn logistic_invert(observation: f64, theta0: f64, theta1: f64) -> Result<SyntheticObservation<f64>> {
    use std::f64::consts::PI;
    if theta1 == 0.0 || !theta1.is_finite() {
        return Err(AssistError::NonInvertible);
    }
    let p = ((observation + PI) / (2.0 * PI)).clamp(0.0, 1.0);
    let logit = (p / (1.0 - p)).ln();
    let raw = (logit - theta0) / theta1;
    let payload = if raw.is_nan() { 0.0 } else { raw.clamp(-PI, PI) };
    Ok(SyntheticObservation {
        payload,
        objective_value: (payload - raw).abs().min(f64::MAX),
        candidate_count: 1,
    })
}

/// One line of the per-step synthesis log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisLogEntry {
    pub t: usize,
    pub candidates_scored: usize,
    pub chosen: String,
    pub objective: f64,
    pub assistant_entropy: f64,
    pub user_entropy: f64,
}
