//! Tilt-lander episodes with a percept-distorting user, and the fit-then-assist
//! loop that learns the distortion.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, Condition, EpisodeMetrics, ExperimentConfig, ExperimentOutput, HarnessError,
    LanderExperimentConfig, Result, Stream,
};
use crate::assistant::logistic_invert;
use crate::env::{LanderState, TiltLanderEnv};
use crate::learner::{fit_user_model, run_online_update, Demonstration, LogisticFamily, OptimizerConfig, ShownObservation, Task};
use crate::user::{lander_user_policy, DistortedPerceptUser};

/// Environment and assistant half of a lander episode: the indicator angle
/// shown each step and the dynamics. The user's thruster choices come from
/// outside.
#[derive(Debug, Clone)]
pub struct LanderStepper {
    env: TiltLanderEnv,
    condition: Condition,
    theta_hat: Option<[f64; 2]>,
    assist_rng: ChaCha8Rng,
    state: LanderState,
    t: usize,
    total: f64,
    tail: Vec<f64>,
}

impl LanderStepper {
    /// `theta_hat` is the assistant's estimate of the user's percept map and
    /// is required for the ASE condition.
    pub fn new(
        c: &LanderExperimentConfig,
        condition: Condition,
        theta_hat: Option<[f64; 2]>,
        root_seed: u64,
        episode: u64,
    ) -> Result<Self> {
        let theta_hat = match condition {
            Condition::Oracle => {
                return Err(HarnessError::InvalidConfig("no oracle condition for tilt_lander".into()));
            }
            Condition::NaiveAse => {
                let id = DistortedPerceptUser::identity();
                Some([id.theta0, id.theta1])
            }
            Condition::Ase => Some(
                theta_hat.ok_or_else(|| HarnessError::InvalidConfig("ase needs a fitted percept map".into()))?,
            ),
            _ => None,
        };
        let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Env));
        let env = TiltLanderEnv::generate(c.lander.clone(), &mut env_rng)?;
        let state = env.reset();
        Ok(Self {
            env,
            condition,
            theta_hat,
            assist_rng: ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Assist)),
            state,
            t: 0,
            total: 0.0,
            tail: Vec::new(),
        })
    }

    pub fn state(&self) -> LanderState {
        self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn done(&self) -> bool {
        self.t >= self.env.config().horizon
    }

    /// Indicator angle shown at the current step. Call once per step.
    pub fn observe(&mut self) -> Result<f64> {
        let o = self.env.observe(&self.state);
        Ok(match self.theta_hat {
            Some([t0, t1]) => logistic_invert(o, t0, t1)?.payload,
            None if self.condition == Condition::Random => self.assist_rng.random_range(-PI..=PI),
            None => o,
        })
    }

    /// Applies one thruster action; returns whether the episode is over.
    pub fn act(&mut self, action: usize) -> Result<bool> {
        if self.done() {
            return Err(HarnessError::InvalidConfig("lander episode already finished".into()));
        }
        let horizon = self.env.config().horizon;
        let (next, reward, done) = self.env.step(&self.state, action, self.t)?;
        self.total += reward;
        self.state = next;
        if self.t >= horizon - horizon / 3 {
            self.tail.push(next.angle.abs());
        }
        self.t += 1;
        Ok(done)
    }

    pub fn metrics(&self, episode: u64) -> EpisodeMetrics {
        EpisodeMetrics {
            episode,
            environment: "tilt_lander".into(),
            condition: self.condition.name().into(),
            episode_return: Some(self.total),
            mean_abs_tilt: Some(self.tail.iter().sum::<f64>() / self.tail.len().max(1) as f64),
            ..Default::default()
        }
    }
}

/// One episode with the simulated user at the thrusters.
pub fn run_lander_episode(
    c: &LanderExperimentConfig,
    condition: Condition,
    theta_hat: Option<[f64; 2]>,
    root_seed: u64,
    episode: u64,
) -> Result<(Demonstration, EpisodeMetrics)> {
    let mut stepper = LanderStepper::new(c, condition, theta_hat, root_seed, episode)?;
    let mut user_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::User));
    let user = DistortedPerceptUser {
        theta0: c.true_theta[0],
        theta1: c.true_theta[1],
    };
    let mut demo = Demonstration {
        episode_id: episode,
        env: "tilt_lander".into(),
        task: Task::Label { label: "level".into() },
        observations: Vec::new(),
        actions: Vec::new(),
    };
    while !stepper.done() {
        let shown = stepper.observe()?;
        let action = lander_user_policy(user.percept(shown), c.kappa, &mut user_rng);
        demo.observations.push(ShownObservation::Angle { value: shown });
        demo.actions.push(action.index());
        stepper.act(action.index())?;
    }
    Ok((demo, stepper.metrics(episode)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanderLearning {
    pub theta_hat: [f64; 2],
    /// Estimate after the warm-up fit and after each assisted refit.
    pub theta_trace: Vec<[f64; 2]>,
    pub demonstrations: Vec<Demonstration>,
}

/// Logs `warmup_episodes` unassisted episodes, fits from the identity map,
/// then runs `assisted_episodes` assisted episodes with a refit after each.
/// Uses episode ids `0..warmup + assisted`.
pub fn learn_percept_map(c: &LanderExperimentConfig, optimizer: &OptimizerConfig, root_seed: u64) -> Result<LanderLearning> {
    let family = LogisticFamily { kappa: c.kappa };
    let mut dataset: Vec<Demonstration> = (0..c.warmup_episodes as u64)
        .map(|e| run_lander_episode(c, Condition::Unassisted, None, root_seed, e).map(|(d, _)| d))
        .collect::<Result<_>>()?;
    let id = DistortedPerceptUser::identity();
    let mut theta = [id.theta0, id.theta1];
    let mut trace = Vec::new();
    if !dataset.is_empty() {
        let fit = fit_user_model(&family, &dataset, &theta, optimizer)?;
        theta = [fit.theta_hat[0], fit.theta_hat[1]];
        trace.push(theta);
    }
    for k in 0..c.assisted_episodes as u64 {
        let e = c.warmup_episodes as u64 + k;
        let (demo, _) = run_lander_episode(c, Condition::Ase, Some(theta), root_seed, e)?;
        let fit = run_online_update(&family, &theta, demo, &mut dataset, optimizer)?;
        theta = [fit.theta_hat[0], fit.theta_hat[1]];
        trace.push(theta);
    }
    Ok(LanderLearning {
        theta_hat: theta,
        theta_trace: trace,
        demonstrations: dataset,
    })
}

/// Evaluation episodes start after the learning episodes so the two never
/// share a seed.
pub fn evaluation_episodes(c: &LanderExperimentConfig, count: usize) -> std::ops::Range<u64> {
    let first = (c.warmup_episodes + c.assisted_episodes) as u64;
    first..first + count as u64
}

pub fn evaluate_lander(
    c: &LanderExperimentConfig,
    condition: Condition,
    theta_hat: Option<[f64; 2]>,
    root_seed: u64,
    episodes: std::ops::Range<u64>,
) -> Result<Vec<(Demonstration, EpisodeMetrics)>> {
    episodes
        .into_par_iter()
        .map(|e| run_lander_episode(c, condition, theta_hat, root_seed, e))
        .collect()
}

pub(super) fn run_lander_experiment(c: &LanderExperimentConfig, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut theta_trace = Vec::new();
    let mut theta_hat = None;
    if config.condition == Condition::Ase {
        let learner = config.learner.as_ref().expect("validated");
        if learner.online {
            let learned = learn_percept_map(c, &learner.optimizer, config.root_seed)?;
            theta_trace = learned.theta_trace.iter().map(|t| t.to_vec()).collect();
            theta_hat = Some(learned.theta_hat);
        } else {
            let id = DistortedPerceptUser::identity();
            let init = learner.init_theta.clone().unwrap_or(vec![id.theta0, id.theta1]);
            if init.len() != 2 {
                return Err(HarnessError::InvalidConfig("lander init_theta needs 2 entries".into()));
            }
            theta_hat = Some([init[0], init[1]]);
        }
    }
    let results = evaluate_lander(
        c,
        config.condition,
        theta_hat,
        config.root_seed,
        evaluation_episodes(c, config.episodes),
    )?;
    let (demonstrations, metrics) = results.into_iter().unzip();
    Ok(ExperimentOutput {
        metrics,
        demonstrations,
        theta_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correct_estimate_makes_the_user_perceive_the_true_angle() {
        let c = LanderExperimentConfig::default();
        let user = DistortedPerceptUser {
            theta0: c.true_theta[0],
            theta1: c.true_theta[1],
        };
        let (demo, _) = run_lander_episode(&c, Condition::Ase, Some(c.true_theta), 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(2, 0, Stream::Env));
        let env = TiltLanderEnv::generate(c.lander.clone(), &mut rng).unwrap();
        let mut state = env.reset();
        for (t, (obs, &a)) in demo.observations.iter().zip(&demo.actions).enumerate() {
            let ShownObservation::Angle { value } = obs else { panic!() };
            assert!((user.percept(*value) - state.angle).abs() < 1e-9);
            state = env.step(&state, a, t).unwrap().0;
        }
    }

    #[test]
    fn ase_requires_estimate() {
        let c = LanderExperimentConfig::default();
        assert!(run_lander_episode(&c, Condition::Ase, None, 1, 0).is_err());
        assert!(run_lander_episode(&c, Condition::Oracle, None, 1, 0).is_err());
    }

    #[test]
    fn learning_produces_one_estimate_per_fit() {
        let c = LanderExperimentConfig {
            warmup_episodes: 2,
            assisted_episodes: 2,
            ..Default::default()
        };
        let learned = learn_percept_map(&c, &OptimizerConfig::default(), 5).unwrap();
        assert_eq!(learned.theta_trace.len(), 3);
        assert_eq!(learned.demonstrations.len(), 4);
        assert_eq!(evaluation_episodes(&c, 3), 4..7);
    }
}
