//! Grid navigation episodes and the online trust-learning loop.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Condition, EpisodeMetrics, ExperimentConfig, ExperimentOutput, HarnessError, Result, Stream};
use crate::assistant::{synthesize_enumerative, NavCandidates, NavUserView};
use crate::belief::{bayes_update, DiscreteBelief, ImpossiblePolicy};
use crate::env::mapgen::{self, MapProfile};
use crate::env::{GridMap, GridNavEnv, ObjectId};
use crate::learner::{run_online_update, Demonstration, NavFamily, ShownObservation, Task};
use crate::policy::{QCache, SoftQConfig};
use crate::user::{user_act, BoltzmannPolicy, ThetaLayout, WeightedObsUser};

/// Floor applied to `ln b(s_true)` so a zero-probability true state scores a
/// finite penalty.
pub const LOG_BELIEF_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum MapSource {
    Profile { profile: String, seed: u64 },
    File { path: PathBuf },
}

impl MapSource {
    pub fn load(&self) -> Result<GridMap> {
        match self {
            MapSource::Profile { profile, seed } => {
                let profile: MapProfile = profile.parse().map_err(HarnessError::InvalidConfig)?;
                Ok(mapgen::generate(profile, *seed))
            }
            MapSource::File { path } => Ok(GridMap::load(path)?),
        }
    }
}

/// What the environment shows an unassisted user each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavAmbient {
    /// One object sampled uniformly from the visible set.
    #[default]
    Sampled,
    /// Every visible object at once; a bandwidth-limited user ignores sets
    /// larger than `max_items`.
    FullSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub map: MapSource,
    pub horizon: usize,
    /// Hidden trust parameters of the simulated user.
    pub user_theta: Vec<f64>,
    pub layout: ThetaLayout,
    /// Largest observation set the user can take in.
    pub max_items: usize,
    pub user_beta: f64,
    pub candidates: NavCandidates,
    #[serde(default)]
    pub ambient: NavAmbient,
    pub soft_q: SoftQConfig,
    pub allow_wait: bool,
    pub q_cache_dir: Option<PathBuf>,
}

impl NavConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.max_items == 0 {
            return Err(HarnessError::InvalidConfig("horizon and max_items must be positive".into()));
        }
        if !(self.user_beta > 0.0) {
            return Err(HarnessError::InvalidConfig("user_beta must be positive".into()));
        }
        if self.user_theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(HarnessError::InvalidConfig("user_theta entries must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Map, solved goal policies and the simulated user's hidden model.
pub struct NavWorld {
    pub env: GridNavEnv,
    pub config: NavConfig,
    pub user: WeightedObsUser,
    cache: QCache,
    map_hash: String,
    policies: Mutex<HashMap<(usize, usize), Arc<BoltzmannPolicy>>>,
}

impl NavWorld {
    pub fn new(config: NavConfig) -> Result<Self> {
        config.validate()?;
        let env = GridNavEnv::new(config.map.load()?, config.allow_wait)?;
        let user = WeightedObsUser::from_theta(&env, config.layout, &config.user_theta, config.max_items)?;
        let cache = match &config.q_cache_dir {
            Some(dir) => QCache::with_dir(dir.clone()),
            None => QCache::in_memory(),
        };
        let map_hash = env.map().content_hash();
        Ok(Self {
            env,
            config,
            user,
            cache,
            map_hash,
            policies: Mutex::new(HashMap::new()),
        })
    }

    /// Boltzmann policy toward `goal`, solved once and shared.
    pub fn policy(&self, goal: (usize, usize)) -> Result<Arc<BoltzmannPolicy>> {
        if let Some(p) = self.policies.lock().expect("policy lock").get(&goal) {
            return Ok(p.clone());
        }
        let goal_states = self.env.goal_states(goal);
        let table = self
            .cache
            .get_or_solve(&self.env, &self.map_hash, &goal_states, &self.config.soft_q)?;
        let policy = Arc::new(BoltzmannPolicy::new(table, self.config.user_beta)?);
        self.policies.lock().expect("policy lock").insert(goal, policy.clone());
        Ok(policy)
    }

    /// Policies for every goal appearing in `demos`.
    pub fn policies_for(&self, demos: &[Demonstration]) -> Result<HashMap<(usize, usize), Arc<BoltzmannPolicy>>> {
        let mut out = HashMap::new();
        for d in demos {
            if let Task::GoalCell { x, y } = d.task {
                if let std::collections::hash_map::Entry::Vacant(e) = out.entry((x, y)) {
                    e.insert(self.policy((x, y))?);
                }
            }
        }
        Ok(out)
    }

    /// Uniform start state and goal cell for episode `episode`.
    pub fn sample_task(&self, root_seed: u64, episode: u64) -> NavTask {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Task));
        let start = rng.random_range(0..self.env.num_states());
        let cells = self.env.free_cells();
        let goal = cells[rng.random_range(0..cells.len())];
        NavTask { start, goal }
    }

    pub fn model_for(&self, theta: &[f64]) -> Result<WeightedObsUser> {
        Ok(WeightedObsUser::from_theta(
            &self.env,
            self.config.layout,
            theta,
            self.config.max_items,
        )?)
    }

    pub fn family(&self, demos: &[Demonstration]) -> Result<NavFamily<'_>> {
        Ok(NavFamily {
            env: &self.env,
            layout: self.config.layout,
            max_items: self.config.max_items,
            policies: self.policies_for(demos)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavTask {
    pub start: usize,
    pub goal: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavEpisode {
    pub demonstration: Demonstration,
    pub metrics: EpisodeMetrics,
}

/// Environment and assistant half of a nav episode. It owns the episode's
/// environment and assistant randomness, so the same seed and action sequence
/// always yields the same shown observations, whoever chooses the actions.
#[derive(Debug, Clone)]
pub struct NavStepper {
    task: NavTask,
    condition: Condition,
    model: Option<WeightedObsUser>,
    env_rng: ChaCha8Rng,
    assist_rng: ChaCha8Rng,
    state: usize,
    t: usize,
    assistant_belief: DiscreteBelief,
    modeled_user: DiscreteBelief,
    last_action: Option<usize>,
}

impl NavStepper {
    pub fn new(
        world: &NavWorld,
        task: NavTask,
        condition: Condition,
        model: Option<&WeightedObsUser>,
        root_seed: u64,
        episode: u64,
    ) -> Result<Self> {
        if condition == Condition::Oracle {
            return Err(HarnessError::InvalidConfig("no oracle condition for grid_nav".into()));
        }
        let model = match (condition.uses_user_model(), model) {
            (true, None) => {
                return Err(HarnessError::InvalidConfig(format!("{condition} needs a user model")));
            }
            (true, m) => m.cloned(),
            (false, _) => None,
        };
        if task.start >= world.env.num_states() {
            return Err(HarnessError::InvalidConfig(format!("start state {} out of range", task.start)));
        }
        let n = world.env.num_states();
        Ok(Self {
            task,
            condition,
            model,
            env_rng: ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Env)),
            assist_rng: ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::Assist)),
            state: task.start,
            t: 0,
            assistant_belief: DiscreteBelief::uniform(n),
            modeled_user: DiscreteBelief::uniform(n),
            last_action: None,
        })
    }

    pub fn task(&self) -> NavTask {
        self.task
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Actions taken so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn last_action(&self) -> Option<usize> {
        self.last_action
    }

    pub fn at_goal(&self, world: &NavWorld) -> bool {
        world.env.cell_of(self.state) == self.task.goal
    }

    /// What the user is shown at the current step. Call once per step, before
    /// [`NavStepper::act`].
    pub fn observe(&mut self, world: &NavWorld) -> Result<Vec<ObjectId>> {
        let env = &world.env;
        let state = self.state;
        let ambient = env.observe(state, &mut self.env_rng);
        Ok(match self.condition {
            Condition::Unassisted => match world.config.ambient {
                NavAmbient::Sampled => ambient.into_iter().collect(),
                NavAmbient::FullSet => env.full_observe(state).to_vec(),
            },
            Condition::Random => {
                let candidates = world.config.candidates.list(env, state);
                candidates[self.assist_rng.random_range(0..candidates.len())]
                    .into_iter()
                    .collect()
            }
            Condition::NaiveAse | Condition::Ase => {
                let model = self.model.as_ref().expect("checked in new");
                let full = env.full_set_likelihood(env.full_observe(state));
                self.assistant_belief = bayes_update(&self.assistant_belief, self.last_action, &full, env)?
                    .resolve(ImpossiblePolicy::ResetUniform);
                let predicted = match self.last_action {
                    Some(a) => crate::belief::predict(&self.modeled_user, a, env)?,
                    None => self.modeled_user.clone(),
                };
                let view = NavUserView { env, user: model };
                let candidates = world.config.candidates.list(env, state);
                let chosen: Vec<ObjectId> = synthesize_enumerative(&self.assistant_belief, &view, &predicted, &candidates)?
                    .payload
                    .into_iter()
                    .collect();
                self.modeled_user = model.condition(env, &predicted, &chosen);
                chosen
            }
            Condition::Oracle => unreachable!("rejected in new"),
        })
    }

    pub fn act(&mut self, world: &NavWorld, action: usize) -> Result<()> {
        if action >= world.env.num_actions() {
            return Err(HarnessError::InvalidConfig(format!("illegal nav action {action}")));
        }
        self.state = world.env.next_state(self.state, action);
        self.last_action = Some(action);
        self.t += 1;
        Ok(())
    }
}

/// One episode with the simulated user choosing the actions.
pub fn run_nav_episode(
    world: &NavWorld,
    task: NavTask,
    condition: Condition,
    model: Option<&WeightedObsUser>,
    root_seed: u64,
    episode: u64,
) -> Result<NavEpisode> {
    let mut stepper = NavStepper::new(world, task, condition, model, root_seed, episode)?;
    let env = &world.env;
    let policy = world.policy(task.goal)?;
    let mut user_rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, episode, Stream::User));

    let distances = env.cell_distances(task.goal);
    let dist = |s: usize| env.cell_distance(&distances, env.cell_of(s)).unwrap_or(usize::MAX) as f64;
    let d0 = dist(task.start);
    let normalized = |s: usize| if d0 == 0.0 { 0.0 } else { dist(s) / d0 };

    let mut user_belief = DiscreteBelief::uniform(env.num_states());
    let mut demo = Demonstration {
        episode_id: episode,
        env: "grid_nav".into(),
        task: Task::GoalCell {
            x: task.goal.0,
            y: task.goal.1,
        },
        observations: Vec::new(),
        actions: Vec::new(),
    };
    let mut trace = vec![normalized(task.start)];
    let mut log_beliefs = Vec::new();
    let mut time_to_goal = None;

    for t in 0..world.config.horizon {
        if stepper.at_goal(world) {
            time_to_goal = Some(t);
            break;
        }
        let shown = stepper.observe(world)?;
        user_belief = world.user.update(env, &user_belief, stepper.last_action(), &shown);
        log_beliefs.push(user_belief.prob(stepper.state()).ln().max(LOG_BELIEF_FLOOR));
        let action = user_act(&policy, &user_belief, &mut user_rng);
        demo.observations.push(ShownObservation::Objects {
            ids: shown.iter().map(|o| o.0).collect(),
        });
        demo.actions.push(action);
        stepper.act(world, action)?;
        trace.push(normalized(stepper.state()));
    }
    if time_to_goal.is_none() && stepper.at_goal(world) {
        time_to_goal = Some(demo.actions.len());
    }
    let last = *trace.last().expect("trace starts non-empty");
    trace.resize(world.config.horizon + 1, last);
    let metrics = EpisodeMetrics {
        episode,
        environment: "grid_nav".into(),
        condition: condition.name().into(),
        success: Some(time_to_goal.is_some()),
        distance_to_goal_normalized: Some(last),
        time_to_goal,
        belief_in_true_state: (!log_beliefs.is_empty())
            .then(|| log_beliefs.iter().sum::<f64>() / log_beliefs.len() as f64),
        episode_return: Some(-(demo.actions.len() as f64)),
        distance_trace: trace,
        ..Default::default()
    };
    Ok(NavEpisode {
        demonstration: demo,
        metrics,
    })
}

/// Evaluates one condition with a fixed user model over `episodes` seed-paired
/// episodes.
pub fn evaluate_condition(
    world: &NavWorld,
    condition: Condition,
    model_theta: Option<&[f64]>,
    root_seed: u64,
    episodes: std::ops::Range<u64>,
) -> Result<Vec<NavEpisode>> {
    let model = model_theta.map(|t| world.model_for(t)).transpose()?;
    episodes
        .into_par_iter()
        .map(|e| {
            let task = world.sample_task(root_seed, e);
            run_nav_episode(world, task, condition, model.as_ref(), root_seed, e)
        })
        .collect()
}

/// Learning curve of the online loop.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OnlineReport {
    /// Fitted parameters after each episode.
    pub theta_trace: Vec<Vec<f64>>,
    pub episodes: Vec<NavEpisode>,
}

/// Alternates assisted episodes under the current estimate with refits on all
/// logged episodes, starting from `init_theta`.
pub fn run_online_loop(
    world: &NavWorld,
    init_theta: &[f64],
    optimizer: &crate::learner::OptimizerConfig,
    root_seed: u64,
    episodes: usize,
) -> Result<OnlineReport> {
    let mut theta = init_theta.to_vec();
    let mut dataset = Vec::new();
    let mut family = world.family(&[])?;
    let mut report = OnlineReport::default();
    for e in 0..episodes as u64 {
        let model = world.model_for(&theta)?;
        let task = world.sample_task(root_seed, e);
        let episode = run_nav_episode(world, task, Condition::Ase, Some(&model), root_seed, e)?;
        if let std::collections::hash_map::Entry::Vacant(slot) = family.policies.entry(task.goal) {
            slot.insert(world.policy(task.goal)?);
        }
        let fit = run_online_update(&family, &theta, episode.demonstration.clone(), &mut dataset, optimizer)?;
        theta = fit.theta_hat;
        report.theta_trace.push(theta.clone());
        report.episodes.push(episode);
    }
    Ok(report)
}

pub(super) fn run_nav_experiment(c: &NavConfig, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let world = NavWorld::new(c.clone())?;
    let k = c.layout.dim(&world.env);
    let ones = vec![1.0; k];
    let episodes: Vec<NavEpisode>;
    let mut theta_trace = Vec::new();
    match config.condition {
        Condition::Ase => {
            let learner = config.learner.as_ref().expect("validated");
            let init = learner.init_theta.clone().unwrap_or_else(|| ones.clone());
            if init.len() != k {
                return Err(HarnessError::InvalidConfig(format!(
                    "init_theta has {} entries, layout needs {k}",
                    init.len()
                )));
            }
            if learner.online {
                let report = run_online_loop(&world, &init, &learner.optimizer, config.root_seed, config.episodes)?;
                theta_trace = report.theta_trace;
                episodes = report.episodes;
            } else {
                episodes = evaluate_condition(
                    &world,
                    Condition::Ase,
                    Some(&init),
                    config.root_seed,
                    0..config.episodes as u64,
                )?;
            }
        }
        Condition::NaiveAse => {
            episodes = evaluate_condition(
                &world,
                Condition::NaiveAse,
                Some(&ones),
                config.root_seed,
                0..config.episodes as u64,
            )?;
        }
        other => {
            episodes = evaluate_condition(&world, other, None, config.root_seed, 0..config.episodes as u64)?;
        }
    }
    Ok(ExperimentOutput {
        metrics: episodes.iter().map(|e| e.metrics.clone()).collect(),
        demonstrations: episodes.into_iter().map(|e| e.demonstration).collect(),
        theta_trace,
    })
}
