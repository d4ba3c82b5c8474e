//! Experiment orchestration: seed derivation, experiment configs, per-episode
//! runners for every environment, the online learning loop, sweeps and the
//! metrics CSV.

pub mod lander;
pub mod nav;
pub mod rows;
pub mod track;

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assistant::{AssistError, NavCandidates};
use crate::belief::BeliefError;
use crate::env::mapgen::MapProfile;
use crate::env::{DelayTrackConfig, EnvError, TiltLanderConfig};
use crate::learner::{LearnError, OptimizerConfig};
use crate::policy::{PolicyError, SoftQConfig};
use crate::user::{DelayBlindDriver, ThetaLayout, UserError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    User(#[from] UserError),
    #[error(transparent)]
    Assist(#[from] AssistError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Independent random streams of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    User = 2,
    Assist = 3,
    Task = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `stream` of episode `episode` under `root`. Conditions share it, so
/// seed-paired runs see identical environment realizations.
pub fn derive_seed(root: u64, episode: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ episode) ^ stream as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Unassisted,
    Random,
    NaiveAse,
    Ase,
    Oracle,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Unassisted,
        Condition::Random,
        Condition::NaiveAse,
        Condition::Ase,
        Condition::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Unassisted => "unassisted",
            Condition::Random => "random",
            Condition::NaiveAse => "naive_ase",
            Condition::Ase => "ase",
            Condition::Oracle => "oracle",
        }
    }

    pub fn uses_user_model(self) -> bool {
        matches!(self, Condition::NaiveAse | Condition::Ase)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s || c.name().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    GridNav(nav::NavConfig),
    RowReveal(rows::RowConfig),
    DelayTrack(TrackExperimentConfig),
    TiltLander(LanderExperimentConfig),
}

impl EnvironmentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvironmentConfig::GridNav(_) => "grid_nav",
            EnvironmentConfig::RowReveal(_) => "row_reveal",
            EnvironmentConfig::DelayTrack(_) => "delay_track",
            EnvironmentConfig::TiltLander(_) => "tilt_lander",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackExperimentConfig {
    pub track: DelayTrackConfig,
    pub driver: DelayBlindDriver,
    /// Standard deviation of the Gaussian used to score belief accuracy.
    pub belief_sigma: f64,
}

impl Default for TrackExperimentConfig {
    fn default() -> Self {
        Self {
            track: DelayTrackConfig::default(),
            driver: DelayBlindDriver::default(),
            belief_sigma: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanderExperimentConfig {
    pub lander: TiltLanderConfig,
    /// Hidden percept distortion of the simulated user.
    pub true_theta: [f64; 2],
    pub kappa: f64,
    /// Unassisted episodes logged before the first fit.
    pub warmup_episodes: usize,
    /// Assisted episodes, each followed by a refit.
    pub assisted_episodes: usize,
}

impl Default for LanderExperimentConfig {
    fn default() -> Self {
        Self {
            lander: TiltLanderConfig::default(),
            true_theta: [0.0, 0.3],
            kappa: 30.0,
            warmup_episodes: 10,
            assisted_episodes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Starting parameters; `None` means the unbiased model.
    pub init_theta: Option<Vec<f64>>,
    /// Refit after every episode.
    pub online: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            init_theta: None,
            online: true,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub condition: Condition,
    pub episodes: usize,
    pub root_seed: u64,
    #[serde(default)]
    pub learner: Option<LearnerConfig>,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    #[serde(default)]
    pub demonstrations_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(HarnessError::InvalidConfig("episodes must be positive".into()));
        }
        if self.condition.uses_user_model() && self.learner.is_none() {
            return Err(HarnessError::InvalidConfig(format!(
                "condition {} needs a learner config",
                self.condition
            )));
        }
        let env = &self.environment;
        if self.condition == Condition::Oracle && !matches!(env, EnvironmentConfig::DelayTrack(_)) {
            return Err(HarnessError::InvalidConfig(
                "the oracle condition is only defined for delay_track".into(),
            ));
        }
        match env {
            EnvironmentConfig::GridNav(c) => c.validate()?,
            EnvironmentConfig::RowReveal(c) => c.validate()?,
            EnvironmentConfig::DelayTrack(c) => {
                c.track.validate()?;
                if !(c.belief_sigma > 0.0) {
                    return Err(HarnessError::InvalidConfig("belief_sigma must be positive".into()));
                }
            }
            EnvironmentConfig::TiltLander(c) => {
                c.lander.validate()?;
                if !(c.kappa > 0.0) {
                    return Err(HarnessError::InvalidConfig("kappa must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-episode metrics. Fields that do not apply to an environment stay `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub environment: String,
    pub condition: String,
    pub success: Option<bool>,
    /// Final distance to goal over the initial distance.
    pub distance_to_goal_normalized: Option<f64>,
    pub time_to_goal: Option<usize>,
    /// Mean per-step `ln b_user(s_true)`.
    pub belief_in_true_state: Option<f64>,
    #[serde(rename = "return")]
    pub episode_return: Option<f64>,
    pub mean_abs_tilt: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Normalized distance at every timestep `0..=horizon` (nav only).
    #[serde(skip)]
    pub distance_trace: Vec<f64>,
    /// Whether the user's guess was right after each step (rows only).
    #[serde(skip)]
    pub per_step_accuracy: Vec<f64>,
}

/// Frozen CSV column order.
pub const METRICS_COLUMNS: [&str; 11] = [
    "episode",
    "environment",
    "condition",
    "success",
    "distance_to_goal_normalized",
    "time_to_goal",
    "belief_in_true_state",
    "return",
    "mean_abs_tilt",
    "final_accuracy",
    "per_step_accuracy",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(writer: W, rows: &[EpisodeMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_COLUMNS)?;
    for m in rows {
        let accuracy = m
            .per_step_accuracy
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            m.episode.to_string(),
            m.environment.clone(),
            m.condition.clone(),
            opt(&m.success.map(u8::from)),
            opt(&m.distance_to_goal_normalized),
            opt(&m.time_to_goal),
            opt(&m.belief_in_true_state),
            opt(&m.episode_return),
            opt(&m.mean_abs_tilt),
            opt(&m.final_accuracy),
            accuracy,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_cell<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, line: u64) -> Result<Option<T>> {
    let cell = record.get(i).unwrap_or("");
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| HarnessError::InvalidConfig(format!("line {line}: bad {} value {cell:?}", METRICS_COLUMNS[i])))
}

/// Reads a file written by [`write_metrics_csv`]. Nav distance traces are not
/// part of the CSV and come back empty.
pub fn read_metrics_csv<R: std::io::Read>(reader: R) -> Result<Vec<EpisodeMetrics>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_COLUMNS {
        return Err(HarnessError::InvalidConfig(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for (k, record) in r.records().enumerate() {
        let record = record?;
        let line = k as u64 + 2;
        let success: Option<u8> = parse_cell(&record, 3, line)?;
        let per_step = record.get(10).unwrap_or("");
        out.push(EpisodeMetrics {
            episode: parse_cell(&record, 0, line)?
                .ok_or_else(|| HarnessError::InvalidConfig(format!("line {line}: missing episode")))?,
            environment: record.get(1).unwrap_or("").to_string(),
            condition: record.get(2).unwrap_or("").to_string(),
            success: success.map(|s| s != 0),
            distance_to_goal_normalized: parse_cell(&record, 4, line)?,
            time_to_goal: parse_cell(&record, 5, line)?,
            belief_in_true_state: parse_cell(&record, 6, line)?,
            episode_return: parse_cell(&record, 7, line)?,
            mean_abs_tilt: parse_cell(&record, 8, line)?,
            final_accuracy: parse_cell(&record, 9, line)?,
            distance_trace: Vec::new(),
            per_step_accuracy: if per_step.is_empty() {
                Vec::new()
            } else {
                per_step
                    .split(';')
                    .map(|a| {
                        a.parse()
                            .map_err(|_| HarnessError::InvalidConfig(format!("line {line}: bad accuracy {a:?}")))
                    })
                    .collect::<Result<_>>()?
            },
        });
    }
    Ok(out)
}

/// Means of the populated metric columns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub environment: String,
    pub condition: String,
    pub episodes: usize,
    pub success_rate: Option<f64>,
    pub distance_to_goal_normalized: Option<f64>,
    pub time_to_goal: Option<f64>,
    pub belief_in_true_state: Option<f64>,
    pub mean_return: Option<f64>,
    pub mean_abs_tilt: Option<f64>,
    pub final_accuracy: Option<f64>,
}

fn mean_of<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(rows: &[EpisodeMetrics]) -> MetricsSummary {
    MetricsSummary {
        environment: rows.first().map(|m| m.environment.clone()).unwrap_or_default(),
        condition: rows.first().map(|m| m.condition.clone()).unwrap_or_default(),
        episodes: rows.len(),
        success_rate: mean_of(rows.iter().filter_map(|m| m.success).map(|s| f64::from(u8::from(s)))),
        distance_to_goal_normalized: mean_of(rows.iter().filter_map(|m| m.distance_to_goal_normalized)),
        time_to_goal: mean_of(rows.iter().filter_map(|m| m.time_to_goal).map(|t| t as f64)),
        belief_in_true_state: mean_of(rows.iter().filter_map(|m| m.belief_in_true_state)),
        mean_return: mean_of(rows.iter().filter_map(|m| m.episode_return)),
        mean_abs_tilt: mean_of(rows.iter().filter_map(|m| m.mean_abs_tilt)),
        final_accuracy: mean_of(rows.iter().filter_map(|m| m.final_accuracy)),
    }
}

/// Column-wise mean of equal-length traces.
pub fn mean_trace(traces: &[&[f64]]) -> Vec<f64> {
    let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = traces.iter().filter_map(|t| t.get(i).copied()).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect()
}

/// Result of `run_experiment`: per-episode metrics plus the fitted user
/// parameters after each episode when an online learner ran.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    pub metrics: Vec<EpisodeMetrics>,
    pub theta_trace: Vec<Vec<f64>>,
    pub demonstrations: Vec<crate::learner::Demonstration>,
}

/// Runs `config.episodes` seed-derived episodes of one condition and writes
/// the configured output files.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let output = match &config.environment {
        EnvironmentConfig::GridNav(c) => nav::run_nav_experiment(c, config)?,
        EnvironmentConfig::RowReveal(c) => rows::run_row_experiment(c, config)?,
        EnvironmentConfig::DelayTrack(c) => track::run_track_experiment(c, config)?,
        EnvironmentConfig::TiltLander(c) => lander::run_lander_experiment(c, config)?,
    };
    if let Some(path) = &config.metrics_path {
        let file = std::fs::File::create(path)?;
        write_metrics_csv(std::io::BufWriter::new(file), &output.metrics)?;
    }
    if let Some(path) = &config.demonstrations_path {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        crate::learner::write_demonstrations(&mut w, &output.demonstrations)?;
        w.flush()?;
    }
    Ok(output)
}

/// Shared nav defaults used by the CLI generator and configs.
pub fn default_nav_config(profile: MapProfile) -> nav::NavConfig {
    match profile {
        MapProfile::FiveByFive => nav::NavConfig {
            map: nav::MapSource::Profile {
                profile: "five_by_five".into(),
                seed: 0,
            },
            horizon: 25,
            user_theta: vec![0.0],
            layout: ThetaLayout::UnknownCategory,
            max_items: 1,
            user_beta: 10.0,
            candidates: NavCandidates::Visible,
            ambient: nav::NavAmbient::Sampled,
            soft_q: SoftQConfig::default(),
            allow_wait: false,
            q_cache_dir: None,
        },
        MapProfile::HabitatScale => nav::NavConfig {
            map: nav::MapSource::Profile {
                profile: "habitat_scale".into(),
                seed: 0,
            },
            horizon: 100,
            user_theta: vec![1.0],
            layout: ThetaLayout::UnknownCategory,
            max_items: 1,
            user_beta: 10.0,
            candidates: NavCandidates::AllSingletons,
            ambient: nav::NavAmbient::FullSet,
            soft_q: SoftQConfig::default(),
            allow_wait: false,
            q_cache_dir: None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, 3, Stream::Env), derive_seed(7, 3, Stream::Env));
        let all = [
            derive_seed(7, 3, Stream::Env),
            derive_seed(7, 3, Stream::User),
            derive_seed(7, 4, Stream::Env),
            derive_seed(8, 3, Stream::Env),
        ];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
        }
        assert_eq!("naive-ase".parse::<Condition>().unwrap(), Condition::NaiveAse);
        assert!("bogus".parse::<Condition>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut config = ExperimentConfig {
            environment: EnvironmentConfig::GridNav(default_nav_config(MapProfile::FiveByFive)),
            condition: Condition::Ase,
            episodes: 3,
            root_seed: 1,
            learner: None,
            metrics_path: None,
            demonstrations_path: None,
        };
        assert!(config.validate().is_err());
        config.learner = Some(LearnerConfig::default());
        config.validate().unwrap();
        config.condition = Condition::Oracle;
        assert!(config.validate().is_err());
        config.environment = EnvironmentConfig::DelayTrack(TrackExperimentConfig::default());
        config.validate().unwrap();
        let text = serde_json::to_string(&config).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), config);
    }

    #[test]
    fn csv_header_is_frozen() {
        let mut buf = Vec::new();
        let row = EpisodeMetrics {
            episode: 2,
            environment: "grid_nav".into(),
            condition: "ase".into(),
            success: Some(true),
            time_to_goal: Some(4),
            ..Default::default()
        };
        write_metrics_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "2,grid_nav,ase,1,,4,,,,,");
    }

    #[test]
    fn summary_means() {
        let rows: Vec<EpisodeMetrics> = [true, false, true, true]
            .iter()
            .map(|&s| EpisodeMetrics {
                success: Some(s),
                ..Default::default()
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.success_rate, Some(0.75));
        assert_eq!(s.mean_return, None);
        assert_eq!(mean_trace(&[&[1.0, 2.0], &[3.0, 4.0]]), vec![2.0, 3.0]);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            EpisodeMetrics {
                episode: 3,
                environment: "row_reveal".into(),
                condition: "ase".into(),
                success: Some(false),
                final_accuracy: Some(0.0),
                per_step_accuracy: vec![0.0, 1.0, 0.0],
                ..Default::default()
            },
            EpisodeMetrics {
                episode: 4,
                environment: "tilt_lander".into(),
                condition: "random".into(),
                episode_return: Some(-12.25),
                mean_abs_tilt: Some(0.1 + 0.2),
                ..Default::default()
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_metrics_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_metrics_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
