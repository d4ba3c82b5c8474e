//! Lane-keeping on a curvy track with intermittent observation delay.
//!
//! The car advances one track segment per step. Steering changes the heading,
//! the heading integrates into the lateral position. Observations are a lane
//! view (road-center offsets over a lookahead window plus the car heading) and
//! a delay flag. The delay schedule alternates a no-delay phase and a delay
//! phase, each `d_max` steps long; during a delay phase the feed repeats the
//! final view of the preceding no-delay phase.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayTrackConfig {
    pub horizon: usize,
    pub road_half_width: f64,
    /// Heading change per steering step.
    pub steer_delta: f64,
    pub max_heading: f64,
    pub lookahead: usize,
    pub d_max: usize,
    /// Standard deviation of the per-step heading disturbance.
    pub disturbance_std: f64,
    pub on_road_bonus: f64,
    pub off_road_penalty: f64,
    /// Amplitudes and periods (in segments) of the two sinusoids shaping the road.
    pub curve_amplitudes: [f64; 2],
    pub curve_periods: [f64; 2],
}

impl Default for DelayTrackConfig {
    fn default() -> Self {
        Self {
            horizon: 200,
            road_half_width: 1.0,
            steer_delta: 0.1,
            max_heading: 0.6,
            lookahead: 5,
            d_max: 5,
            disturbance_std: 0.03,
            on_road_bonus: 1.0,
            off_road_penalty: 1.0,
            curve_amplitudes: [4.0, 1.5],
            curve_periods: [60.0, 23.0],
        }
    }
}

impl DelayTrackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.into()));
        if self.horizon == 0 || self.lookahead == 0 {
            return bad("horizon and lookahead must be positive");
        }
        if !(self.road_half_width > 0.0) || !(self.steer_delta > 0.0) || !(self.max_heading > 0.0) {
            return bad("road width, steering step and heading limit must be positive");
        }
        if !(self.disturbance_std >= 0.0) {
            return bad("disturbance_std must be non-negative");
        }
        if self.curve_periods.iter().any(|p| !(*p > 0.0)) {
            return bad("curve periods must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackAction {
    SteerLeft,
    Straight,
    SteerRight,
}

impl TrackAction {
    pub const ALL: [TrackAction; 3] = [TrackAction::SteerLeft, TrackAction::Straight, TrackAction::SteerRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn steer(self) -> f64 {
        match self {
            TrackAction::SteerLeft => -1.0,
            TrackAction::Straight => 0.0,
            TrackAction::SteerRight => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub index: usize,
    pub lateral: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackView {
    /// `center(index + k) - lateral` for `k = 0..lookahead`.
    pub offsets: Vec<f64>,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub view: TrackView,
    pub delayed: bool,
}

/// One episode's road and disturbance sequence.
#[derive(Debug, Clone)]
pub struct DelayTrackEnv {
    config: DelayTrackConfig,
    centers: Vec<f64>,
    disturbances: Vec<f64>,
}

impl DelayTrackEnv {
    /// Samples a road (random phases) and the per-step disturbances.
    pub fn generate<R: Rng + ?Sized>(config: DelayTrackConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let phases = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        let len = config.horizon + config.lookahead + 1;
        let raw = |i: f64| -> f64 {
            (0..2)
                .map(|k| {
                    config.curve_amplitudes[k] * (std::f64::consts::TAU * i / config.curve_periods[k] + phases[k]).sin()
                })
                .sum()
        };
        let origin = raw(0.0);
        let centers = (0..len).map(|i| raw(i as f64) - origin).collect();
        let disturbances = if config.disturbance_std > 0.0 {
            let normal = Normal::new(0.0, config.disturbance_std).expect("finite std");
            (0..config.horizon).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; config.horizon]
        };
        Ok(Self {
            config,
            centers,
            disturbances,
        })
    }

    /// Straight road along the lateral origin.
    pub fn straight(config: DelayTrackConfig) -> Result<Self> {
        config.validate()?;
        let len = config.horizon + config.lookahead + 1;
        let horizon = config.horizon;
        Ok(Self {
            config,
            centers: vec![0.0; len],
            disturbances: vec![0.0; horizon],
        })
    }

    pub fn with_disturbances(mut self, disturbances: Vec<f64>) -> Self {
        self.disturbances = disturbances;
        self
    }

    pub fn config(&self) -> &DelayTrackConfig {
        &self.config
    }

    pub fn center(&self, index: usize) -> f64 {
        self.centers[index.min(self.centers.len() - 1)]
    }

    pub fn reset(&self) -> CarState {
        CarState {
            index: 0,
            lateral: self.center(0),
            heading: 0.0,
        }
    }

    pub fn on_road(&self, state: &CarState) -> bool {
        (state.lateral - self.center(state.index)).abs() <= self.config.road_half_width
    }

    pub fn render(&self, state: &CarState) -> TrackView {
        TrackView {
            offsets: (0..self.config.lookahead)
                .map(|k| self.center(state.index + k) - state.lateral)
                .collect(),
            heading: state.heading,
        }
    }

    /// Recovers the car state from a view taken at segment `index`.
    pub fn decode(&self, view: &TrackView, index: usize) -> CarState {
        CarState {
            index,
            lateral: self.center(index) - view.offsets[0],
            heading: view.heading,
        }
    }

    /// Dynamics with an explicit heading disturbance.
    pub fn transition(&self, state: &CarState, action: TrackAction, disturbance: f64) -> CarState {
        let heading = (state.heading + self.config.steer_delta * action.steer() + disturbance)
            .clamp(-self.config.max_heading, self.config.max_heading);
        CarState {
            index: state.index + 1,
            lateral: state.lateral + heading,
            heading,
        }
    }

    /// Environment step using this episode's disturbance for `state.index`.
    pub fn step(&self, state: &CarState, action: usize) -> Result<(CarState, f64, bool)> {
        let action = TrackAction::from_index(action).ok_or(EnvError::InvalidAction { action, num_actions: 3 })?;
        let w = self.disturbances.get(state.index).copied().unwrap_or(0.0);
        let next = self.transition(state, action, w);
        let reward = if self.on_road(&next) {
            self.config.on_road_bonus
        } else {
            -self.config.off_road_penalty
        };
        Ok((next, reward, next.index >= self.config.horizon))
    }

    pub fn is_delayed(&self, t: usize) -> bool {
        is_delayed(t, self.config.d_max)
    }

    /// Uniformly random view of a plausible car state at segment `index`.
    pub fn random_view<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> TrackView {
        let w = 2.0 * self.config.road_half_width;
        let state = CarState {
            index,
            lateral: self.center(index) + rng.random_range(-w..=w),
            heading: rng.random_range(-self.config.max_heading..=self.config.max_heading),
        };
        self.render(&state)
    }
}

/// Whether step `t` falls in a delay phase for phase length `d_max`.
pub fn is_delayed(t: usize, d_max: usize) -> bool {
    d_max > 0 && (t / d_max) % 2 == 1
}

/// Produces the delayed observation stream for an episode.
#[derive(Debug, Clone, Default)]
pub struct DelayedFeed {
    last_fresh: Option<TrackView>,
}

impl DelayedFeed {
    pub fn emit(&mut self, env: &DelayTrackEnv, t: usize, state: &CarState) -> TrackObservation {
        if env.is_delayed(t) {
            if let Some(view) = &self.last_fresh {
                return TrackObservation {
                    view: view.clone(),
                    delayed: true,
                };
            }
        }
        let view = env.render(state);
        self.last_fresh = Some(view.clone());
        TrackObservation { view, delayed: false }
    }
}
