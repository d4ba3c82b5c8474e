//! Row-reveal classification episodes under a one-row bandwidth.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Condition, EpisodeMetrics, ExperimentConfig, ExperimentOutput, HarnessError, Result, Stream};
use crate::assistant::synthesize_row;
use crate::env::row_reveal::row_reveal_class_posterior;
use crate::env::{ClassPixelModel, RowRevealEnv};
use crate::learner::{Demonstration, ShownObservation, Task};
use crate::user::RowUser;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RowConfig {
    pub num_classes: usize,
    pub rows: usize,
    pub cols: usize,
    /// Pixel-on probability inside a glyph stroke.
    pub p_on: f64,
    /// Pixel-on probability outside a stroke.
    pub p_off: f64,
    /// Optional flat byte dataset `(images, labels)` to fit the pixel model from.
    pub dataset: Option<(PathBuf, PathBuf)>,
}

impl Default for RowConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            rows: 28,
            cols: 28,
            p_on: 0.9,
            p_off: 0.1,
            dataset: None,
        }
    }
}

impl RowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.rows == 0 || self.cols == 0 {
            return Err(HarnessError::InvalidConfig("row_reveal needs >= 2 classes and a non-empty image".into()));
        }
        if !(0.0..=1.0).contains(&self.p_on) || !(0.0..=1.0).contains(&self.p_off) {
            return Err(HarnessError::InvalidConfig("pixel probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ClassPixelModel> {
        Ok(match &self.dataset {
            Some((images, labels)) => ClassPixelModel::load_flat(images, labels, self.num_classes, self.rows, self.cols)?,
            None => ClassPixelModel::synthetic_glyphs(self.num_classes, self.rows, self.cols, self.p_on, self.p_off)?,
        })
    }
}

/// One episode: at step `t` one row is revealed (row `t` when unassisted), the
/// user updates and guesses.
pub fn run_row_episode(
    model: &ClassPixelModel,
    condition: Condition,
    root_seed: u64,
    episode: u64,
) -> Result<(Demonstration, EpisodeMetrics)> {
    if matches!(condition, Condition::NaiveAse | Condition::Oracle) {
        return Err(HarnessError::InvalidConfig(format!("no {condition} condition for row_reveal")));
    }
    let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Env));
    let mut assist_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Assist));
    let env = RowRevealEnv::reset(model, &mut env_rng);
    let all_rows: Vec<(usize, &[bool])> = (0..env.horizon()).map(|r| (r, env.row(r))).collect();
    let assistant = row_reveal_class_posterior(model, &all_rows);
    let mut user = RowUser::new(model.num_classes(), 1);
    let mut unrevealed: Vec<usize> = (0..env.horizon()).collect();
    let mut accuracy = Vec::with_capacity(env.horizon());
    let mut demo = Demonstration {
        episode_id: episode,
        env: "row_reveal".into(),
        task: Task::Label {
            label: env.true_class.to_string(),
        },
        observations: Vec::new(),
        actions: Vec::new(),
    };
    for t in 0..env.horizon() {
        let row = match condition {
            Condition::Unassisted => t,
            Condition::Random => unrevealed[assist_rng.random_range(0..unrevealed.len())],
            _ => synthesize_row(&assistant, user.log_weights(), &unrevealed, model, &env.true_image)?.payload,
        };
        unrevealed.retain(|&r| r != row);
        user.observe(model, &[(row, env.row(row))]);
        let guess = user.guess();
        accuracy.push(if guess == env.true_class { 1.0 } else { 0.0 });
        demo.observations.push(ShownObservation::Row {
            row,
            pixels: env.row(row).to_vec(),
        });
        demo.actions.push(guess);
    }
    let metrics = EpisodeMetrics {
        episode,
        environment: "row_reveal".into(),
        condition: condition.name().into(),
        success: Some(accuracy.last() == Some(&1.0)),
        final_accuracy: accuracy.last().copied(),
        per_step_accuracy: accuracy,
        ..Default::default()
    };
    Ok((demo, metrics))
}

/// Mean accuracy after each step over `episodes` seed-paired episodes.
pub fn accuracy_curve(model: &ClassPixelModel, condition: Condition, root_seed: u64, episodes: usize) -> Result<Vec<f64>> {
    let rows: Vec<EpisodeMetrics> = (0..episodes as u64)
        .into_par_iter()
        .map(|e| run_row_episode(model, condition, root_seed, e).map(|(_, m)| m))
        .collect::<Result<_>>()?;
    let traces: Vec<&[f64]> = rows.iter().map(|m| m.per_step_accuracy.as_slice()).collect();
    Ok(super::mean_trace(&traces))
}

pub(super) fn run_row_experiment(c: &RowConfig, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let model = c.model()?;
    let results: Vec<(Demonstration, EpisodeMetrics)> = (0..config.episodes as u64)
        .into_par_iter()
        .map(|e| run_row_episode(&model, config.condition, config.root_seed, e))
        .collect::<Result<_>>()?;
    let (demonstrations, metrics) = results.into_iter().unzip();
    Ok(ExperimentOutput {
        metrics,
        demonstrations,
        theta_trace: Vec::new(),
    })
}
