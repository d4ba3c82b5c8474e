//! Delayed lane-keeping episodes and the delay sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, Condition, EpisodeMetrics, ExperimentConfig, ExperimentOutput, HarnessError, Result, Stream,
    TrackExperimentConfig,
};
use crate::assistant::DelayTracker;
use crate::env::delay_track::DelayedFeed;
use crate::env::{DelayTrackEnv, TrackObservation};
use crate::learner::{Demonstration, ShownObservation, Task};

fn gaussian_log_density(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -0.5 * z * z - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// One episode. The road and disturbances depend only on the seed, so every
/// condition and every `d_max` drives the same road.
pub fn run_track_episode(
    c: &TrackExperimentConfig,
    condition: Condition,
    root_seed: u64,
    episode: u64,
) -> Result<(Demonstration, EpisodeMetrics)> {
    if condition == Condition::NaiveAse {
        return Err(HarnessError::InvalidConfig("no naive_ase condition for delay_track".into()));
    }
    let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Env));
    let mut user_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::User));
    let mut assist_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Assist));
    let env = DelayTrackEnv::generate(c.track.clone(), &mut env_rng)?;
    let delta = c.track.steer_delta;
    let mut feed = DelayedFeed::default();
    let mut tracker = DelayTracker::default();
    let mut state = env.reset();
    let mut total = 0.0;
    let mut accuracy = 0.0;
    let mut demo = Demonstration {
        episode_id: episode,
        env: "delay_track".into(),
        task: Task::Label {
            label: "stay_on_road".into(),
        },
        observations: Vec::new(),
        actions: Vec::new(),
    };
    for t in 0..c.track.horizon {
        let ambient = feed.emit(&env, t, &state);
        let shown = match condition {
            Condition::Unassisted => ambient,
            Condition::Random => TrackObservation {
                view: env.random_view(state.index, &mut assist_rng),
                delayed: false,
            },
            Condition::Ase => tracker.assist(&env, t, &ambient),
            Condition::Oracle => TrackObservation {
                view: env.render(&state),
                delayed: false,
            },
            Condition::NaiveAse => unreachable!("rejected above"),
        };
        let truth = env.render(&state).offsets[0];
        accuracy += gaussian_log_density(truth, shown.view.offsets[0], c.belief_sigma);
        let action = c.driver.act(&shown.view, delta, &mut user_rng);
        tracker.record(action);
        demo.observations.push(ShownObservation::TrackView {
            offsets: shown.view.offsets.clone(),
            heading: shown.view.heading,
            delayed: shown.delayed,
        });
        demo.actions.push(action.index());
        let (next, reward, done) = env.step(&state, action.index())?;
        total += reward;
        state = next;
        if done {
            break;
        }
    }
    let steps = demo.actions.len().max(1) as f64;
    let metrics = EpisodeMetrics {
        episode,
        environment: "delay_track".into(),
        condition: condition.name().into(),
        episode_return: Some(total),
        belief_in_true_state: Some(accuracy / steps),
        ..Default::default()
    };
    Ok((demo, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub d_max: usize,
    pub condition: Condition,
    pub mean_return: f64,
    pub mean_belief_accuracy: f64,
    pub returns: Vec<f64>,
}

/// Condition x `d_max` table over seed-paired episodes.
pub fn run_delay_sweep(
    c: &TrackExperimentConfig,
    d_values: &[usize],
    conditions: &[Condition],
    episodes: usize,
    root_seed: u64,
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::new();
    for &d in d_values {
        let mut config = c.clone();
        config.track.d_max = d;
        for &condition in conditions {
            let metrics: Vec<EpisodeMetrics> = (0..episodes as u64)
                .into_par_iter()
                .map(|e| run_track_episode(&config, condition, root_seed, e).map(|(_, m)| m))
                .collect::<Result<_>>()?;
            let returns: Vec<f64> = metrics.iter().map(|m| m.episode_return.unwrap_or(0.0)).collect();
            let n = metrics.len().max(1) as f64;
            out.push(SweepCell {
                d_max: d,
                condition,
                mean_return: returns.iter().sum::<f64>() / n,
                mean_belief_accuracy: metrics.iter().filter_map(|m| m.belief_in_true_state).sum::<f64>() / n,
                returns,
            });
        }
    }
    Ok(out)
}

pub(super) fn run_track_experiment(c: &TrackExperimentConfig, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let results: Vec<(Demonstration, EpisodeMetrics)> = (0..config.episodes as u64)
        .into_par_iter()
        .map(|e| run_track_episode(c, config.condition, config.root_seed, e))
        .collect::<Result<_>>()?;
    let (demonstrations, metrics) = results.into_iter().unzip();
    Ok(ExperimentOutput {
        metrics,
        demonstrations,
        theta_trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delay_makes_ase_a_passthrough() {
        let mut c = TrackExperimentConfig::default();
        c.track.d_max = 0;
        for e in 0..5 {
            let (a, ma) = run_track_episode(&c, Condition::Unassisted, 4, e).unwrap();
            let (b, mb) = run_track_episode(&c, Condition::Ase, 4, e).unwrap();
            assert_eq!(a.actions, b.actions);
            assert_eq!(ma.episode_return, mb.episode_return);
        }
    }

    #[test]
    fn oracle_sees_the_truth() {
        let c = TrackExperimentConfig::default();
        let (_, m) = run_track_episode(&c, Condition::Oracle, 1, 0).unwrap();
        let best = gaussian_log_density(0.0, 0.0, c.belief_sigma);
        assert!((m.belief_in_true_state.unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn sweep_shape() {
        let c = TrackExperimentConfig::default();
        let cells = run_delay_sweep(&c, &[0, 2], &[Condition::Unassisted, Condition::Ase], 2, 1).unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|cell| cell.returns.len() == 2));
    }

    #[test]
    fn naive_condition_rejected() {
        assert!(run_track_episode(&TrackExperimentConfig::default(), Condition::NaiveAse, 1, 0).is_err());
    }
}
