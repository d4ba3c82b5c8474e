//! Session state and message handling, independent of the transport.
//!
//! Each session sits behind its own mutex, so messages for one session are
//! handled one at a time while different sessions proceed in parallel.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ase_core::env::mapgen::MapProfile;
use ase_core::env::{LanderAction, NavAction, ObjectId};
use ase_core::harness::lander::LanderStepper;
use ase_core::harness::nav::{NavConfig, NavStepper, NavWorld};
use ase_core::harness::{default_nav_config, Condition, EpisodeMetrics, HarnessError, LanderExperimentConfig};
use ase_core::learner::{Demonstration, ShownObservation, Task};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;
use uuid::Uuid;

use crate::log::DemoLog;
use crate::protocol::{
    parse_client, ActionSpec, ClientMessage, ErrorCode, Observation, RenderHints, ServerMessage, StartRequest,
    PROTOCOL_VERSION,
};

pub type Outbound = UnboundedSender<ServerMessage>;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid bridge config: {0}")]
    Config(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub nav: NavConfig,
    pub lander: LanderExperimentConfig,
    pub root_seed: u64,
    pub log_dir: Option<PathBuf>,
    /// Lander ticks per second; 0 makes the lander turn-based like grid-nav.
    pub tick_hz: f64,
    pub session_timeout_secs: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            nav: NavConfig {
                allow_wait: true,
                ..default_nav_config(MapProfile::FiveByFive)
            },
            lander: LanderExperimentConfig::default(),
            root_seed: 0,
            log_dir: None,
            tick_hz: 15.0,
            session_timeout_secs: 600,
        }
    }
}

impl BridgeConfig {
    pub fn from_json(text: &str) -> Result<Self, BridgeError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn realtime(&self) -> bool {
        self.tick_hz > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EnvKind {
    Nav,
    Lander,
}

impl EnvKind {
    fn name(self) -> &'static str {
        match self {
            EnvKind::Nav => "grid_nav",
            EnvKind::Lander => "tilt_lander",
        }
    }
}

#[derive(Debug)]
enum Episode {
    Nav(Box<NavStepper>),
    Lander(Box<LanderStepper>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Running,
    AwaitingLabel,
    Finished,
}

#[derive(Debug)]
struct Session {
    id: Uuid,
    env: EnvKind,
    condition: Condition,
    root_seed: u64,
    episode_id: u64,
    debug: bool,
    episode: Episode,
    demo: Demonstration,
    /// Observations shown so far.
    history: Vec<Observation>,
    phase: Phase,
    pending_action: Option<usize>,
    last_seen: Instant,
    outbound: Option<Outbound>,
}

/// Reply to one client message.
#[derive(Debug, Default)]
pub struct Reply {
    pub messages: Vec<ServerMessage>,
    /// A real-time session that just started and needs a ticker.
    pub ticking: Option<Uuid>,
}

impl Reply {
    fn one(msg: ServerMessage) -> Self {
        Self {
            messages: vec![msg],
            ticking: None,
        }
    }
}

type Failure = (ErrorCode, String);

fn fail<T>(code: ErrorCode, message: impl Into<String>) -> Result<T, Failure> {
    Err((code, message.into()))
}

fn internal(e: impl std::fmt::Display) -> Failure {
    (ErrorCode::Internal, e.to_string())
}

pub struct SessionManager {
    config: BridgeConfig,
    nav: NavWorld,
    sessions: Mutex<HashMap<Uuid, Arc<Mutex<Session>>>>,
    next_episode: AtomicU64,
    log: DemoLog,
}

impl SessionManager {
    pub fn new(config: BridgeConfig) -> Result<Self, BridgeError> {
        if !(config.tick_hz >= 0.0) || !config.tick_hz.is_finite() {
            return Err(BridgeError::Config("tick_hz must be finite and non-negative".into()));
        }
        config.lander.lander.validate().map_err(HarnessError::from)?;
        let nav = NavWorld::new(config.nav.clone())?;
        let log = match &config.log_dir {
            Some(dir) => DemoLog::open(dir)?,
            None => DemoLog::disabled(),
        };
        Ok(Self {
            config,
            nav,
            sessions: Mutex::new(HashMap::new()),
            next_episode: AtomicU64::new(0),
            log,
        })
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn nav_world(&self) -> &NavWorld {
        &self.nav
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.path()
    }

    pub fn flush_log(&self) {
        self.log.flush();
    }

    pub fn tick_interval(&self) -> Option<Duration> {
        self.config
            .realtime()
            .then(|| Duration::from_secs_f64(1.0 / self.config.tick_hz))
    }

    /// Live (unexpired) sessions.
    pub fn session_count(&self) -> usize {
        self.sweep_expired();
        self.sessions.lock().expect("session table").len()
    }

    pub fn handle_text(&self, text: &str, outbound: Option<Outbound>) -> Reply {
        match parse_client(text) {
            Ok(msg) => self.handle(msg, outbound),
            Err(err) => Reply::one(err),
        }
    }

    pub fn handle(&self, msg: ClientMessage, outbound: Option<Outbound>) -> Reply {
        match msg {
            ClientMessage::Start(req) => match self.start(req, outbound) {
                Ok(reply) => reply,
                Err((code, message)) => Reply::one(ServerMessage::error(code, message, None)),
            },
            ClientMessage::Action { session, action } => match self.action(session, &action) {
                Ok(messages) => Reply {
                    messages,
                    ticking: None,
                },
                Err((code, message)) => Reply::one(ServerMessage::error(code, message, Some(session))),
            },
            ClientMessage::Label { session, task } => match self.label(session, task) {
                Ok(msg) => Reply::one(msg),
                Err((code, message)) => Reply::one(ServerMessage::error(code, message, Some(session))),
            },
        }
    }

    fn start(&self, req: StartRequest, outbound: Option<Outbound>) -> Result<Reply, Failure> {
        self.sweep_expired();
        let env = match req.env.as_str() {
            "grid_nav" => EnvKind::Nav,
            "tilt_lander" => EnvKind::Lander,
            other => return fail(ErrorCode::UnknownEnv, format!("unknown environment {other:?}")),
        };
        let condition: Condition = match req.condition.parse() {
            Ok(Condition::Oracle) | Err(_) => {
                return fail(
                    ErrorCode::UnknownCondition,
                    format!("unknown condition {:?} for {}", req.condition, env.name()),
                );
            }
            Ok(c) => c,
        };
        let theta = match (&req.theta, &req.theta_file) {
            (Some(t), _) => Some(t.clone()),
            (None, Some(path)) => Some(read_theta_file(path)?),
            (None, None) => None,
        };
        if condition == Condition::Ase && theta.is_none() {
            return fail(ErrorCode::MissingModel, "ase needs theta or theta_file");
        }
        let root_seed = req.seed.unwrap_or(self.config.root_seed);
        let episode_id = match req.episode {
            Some(e) => e,
            None => self.next_episode.fetch_add(1, Ordering::Relaxed),
        };
        let (episode, task) = match env {
            EnvKind::Nav => {
                let theta = match condition {
                    Condition::NaiveAse => Some(vec![1.0; self.nav.config.layout.dim(&self.nav.env)]),
                    Condition::Ase => theta,
                    _ => None,
                };
                let model = theta
                    .map(|t| self.nav.model_for(&t))
                    .transpose()
                    .map_err(|e| (ErrorCode::MissingModel, e.to_string()))?;
                let task = self.nav.sample_task(root_seed, episode_id);
                let stepper = NavStepper::new(&self.nav, task, condition, model.as_ref(), root_seed, episode_id)
                    .map_err(|e| (ErrorCode::BadRequest, e.to_string()))?;
                (
                    Episode::Nav(Box::new(stepper)),
                    Task::GoalCell {
                        x: task.goal.0,
                        y: task.goal.1,
                    },
                )
            }
            EnvKind::Lander => {
                let theta_hat = match theta {
                    Some(t) if t.len() == 2 => Some([t[0], t[1]]),
                    Some(t) => {
                        return fail(ErrorCode::MissingModel, format!("lander theta needs 2 entries, got {}", t.len()));
                    }
                    None => None,
                };
                let stepper = LanderStepper::new(&self.config.lander, condition, theta_hat, root_seed, episode_id)
                    .map_err(|e| (ErrorCode::BadRequest, e.to_string()))?;
                (Episode::Lander(Box::new(stepper)), Task::Label { label: String::new() })
            }
        };
        let id = Uuid::new_v4();
        let mut session = Session {
            id,
            env,
            condition,
            root_seed,
            episode_id,
            debug: req.debug,
            episode,
            demo: Demonstration {
                episode_id,
                env: env.name().into(),
                task,
                observations: Vec::new(),
                actions: Vec::new(),
            },
            history: Vec::new(),
            phase: Phase::Running,
            pending_action: None,
            last_seen: Instant::now(),
            outbound,
        };
        let frame = self.emit_frame(&mut session).map_err(internal)?;
        self.sessions
            .lock()
            .expect("session table")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(Reply {
            messages: vec![frame],
            ticking: (env == EnvKind::Lander && self.config.realtime()).then_some(id),
        })
    }

    fn lookup(&self, id: Uuid) -> Result<Arc<Mutex<Session>>, Failure> {
        let mut table = self.sessions.lock().expect("session table");
        let Some(session) = table.get(&id).cloned() else {
            return fail(ErrorCode::UnknownSession, format!("no session {id}"));
        };
        let expired = session.lock().expect("session").last_seen.elapsed() > self.timeout();
        if expired {
            table.remove(&id);
            drop(table);
            self.retire(&mut session.lock().expect("session"));
            return fail(ErrorCode::ExpiredSession, format!("session {id} expired"));
        }
        Ok(session)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.config.session_timeout_secs)
    }

    fn action(&self, id: Uuid, action: &ActionSpec) -> Result<Vec<ServerMessage>, Failure> {
        let session = self.lookup(id)?;
        let mut s = session.lock().expect("session");
        s.last_seen = Instant::now();
        if s.phase != Phase::Running {
            return fail(ErrorCode::EpisodeOver, "episode already finished");
        }
        let index = self.action_index(s.env, action)?;
        if s.env == EnvKind::Lander && self.config.realtime() {
            s.pending_action = Some(index);
            return Ok(Vec::new());
        }
        self.advance(&mut s, index).map(|m| vec![m])
    }

    /// One real-time lander tick: applies the action received since the last
    /// tick, or a no-op. `None` once the session is gone or finished.
    pub fn tick(&self, id: Uuid) -> Option<ServerMessage> {
        let session = self.sessions.lock().expect("session table").get(&id).cloned()?;
        let mut s = session.lock().expect("session");
        if s.phase != Phase::Running {
            return None;
        }
        s.last_seen = Instant::now();
        let action = s.pending_action.take().unwrap_or(LanderAction::NoOp.index());
        Some(self.advance(&mut s, action).unwrap_or_else(|(code, message)| {
            ServerMessage::error(code, message, Some(id))
        }))
    }

    /// Where a session's pushed messages go.
    pub fn outbound(&self, id: Uuid) -> Option<Outbound> {
        let session = self.sessions.lock().expect("session table").get(&id).cloned()?;
        let s = session.lock().expect("session");
        s.outbound.clone()
    }

    fn label(&self, id: Uuid, task: String) -> Result<ServerMessage, Failure> {
        let session = self.lookup(id)?;
        let mut s = session.lock().expect("session");
        s.last_seen = Instant::now();
        if s.phase != Phase::AwaitingLabel {
            return fail(
                ErrorCode::LabelNotExpected,
                "labels are taken once a lander episode has finished",
            );
        }
        s.demo.task = Task::Label { label: task.clone() };
        s.phase = Phase::Finished;
        self.log.append(s.demo.clone());
        Ok(ServerMessage::Labeled {
            v: PROTOCOL_VERSION,
            session: id,
            task,
        })
    }

    fn action_index(&self, env: EnvKind, action: &ActionSpec) -> Result<usize, Failure> {
        let count = match env {
            EnvKind::Nav => self.nav.env.num_actions(),
            EnvKind::Lander => LanderAction::ALL.len(),
        };
        let index = match action {
            ActionSpec::Index(i) => *i,
            ActionSpec::Name(name) => {
                let value = serde_json::Value::String(name.clone());
                let parsed = match env {
                    EnvKind::Nav => serde_json::from_value::<NavAction>(value).map(NavAction::index).ok(),
                    EnvKind::Lander => serde_json::from_value::<LanderAction>(value).map(LanderAction::index).ok(),
                };
                match parsed {
                    Some(i) => i,
                    None => return fail(ErrorCode::IllegalAction, format!("unknown action {name:?}")),
                }
            }
        };
        if index >= count {
            return fail(ErrorCode::IllegalAction, format!("action {index} out of range (0..{count})"));
        }
        Ok(index)
    }

    /// Applies an action and produces the next frame, or the summary when the
    /// episode ends.
    fn advance(&self, s: &mut Session, action: usize) -> Result<ServerMessage, Failure> {
        s.demo.actions.push(action);
        let finished = match &mut s.episode {
            Episode::Nav(stepper) => {
                stepper.act(&self.nav, action).map_err(internal)?;
                stepper.at_goal(&self.nav) || stepper.t() >= self.nav.config.horizon
            }
            Episode::Lander(stepper) => stepper.act(action).map_err(internal)?,
        };
        if finished {
            return Ok(self.finish(s));
        }
        self.emit_frame(s).map_err(internal)
    }

    fn emit_frame(&self, s: &mut Session) -> Result<ServerMessage, HarnessError> {
        let (observation, hints, shown) = match &mut s.episode {
            Episode::Nav(stepper) => {
                let objects = stepper.observe(&self.nav)?;
                let env = &self.nav.env;
                let goal = stepper.task().goal;
                let mut cells: Vec<[usize; 2]> = objects.iter().flat_map(|&o| env.object(o).cells.clone()).collect();
                cells.sort();
                cells.dedup();
                let (x, y, heading) = env.decode(stepper.state());
                let hints = RenderHints {
                    width: Some(env.map().width),
                    height: Some(env.map().height),
                    mentioned_cells: Some(cells),
                    pose: s.debug.then_some([x, y, heading.index()]),
                    ..Default::default()
                };
                let observation = Observation::Nav {
                    goal: [goal.0, goal.1],
                    objects: objects.iter().map(|&o| env.object(o).id.clone()).collect(),
                    object_ids: objects.iter().map(|o| o.0).collect(),
                };
                let shown = ShownObservation::Objects {
                    ids: objects.iter().map(|&ObjectId(i)| i).collect(),
                };
                (observation, hints, shown)
            }
            Episode::Lander(stepper) => {
                let angle = stepper.observe()?;
                let hints = RenderHints {
                    true_angle: s.debug.then_some(stepper.state().angle),
                    ..Default::default()
                };
                (
                    Observation::Lander { indicator_angle: angle },
                    hints,
                    ShownObservation::Angle { value: angle },
                )
            }
        };
        s.demo.observations.push(shown);
        s.history.push(observation.clone());
        Ok(ServerMessage::Frame {
            v: PROTOCOL_VERSION,
            session: s.id,
            condition: s.condition.name().into(),
            t: s.history.len() - 1,
            observation,
            render_hints: hints,
        })
    }

    fn finish(&self, s: &mut Session) -> ServerMessage {
        let metrics = match &s.episode {
            Episode::Nav(stepper) => {
                let env = &self.nav.env;
                let task = stepper.task();
                let distances = env.cell_distances(task.goal);
                let dist = |state: usize| env.cell_distance(&distances, env.cell_of(state)).unwrap_or(usize::MAX) as f64;
                let d0 = dist(task.start);
                let reached = stepper.at_goal(&self.nav);
                EpisodeMetrics {
                    episode: s.episode_id,
                    environment: s.env.name().into(),
                    condition: s.condition.name().into(),
                    success: Some(reached),
                    distance_to_goal_normalized: Some(if d0 == 0.0 { 0.0 } else { dist(stepper.state()) / d0 }),
                    time_to_goal: reached.then_some(stepper.t()),
                    episode_return: Some(-(stepper.t() as f64)),
                    ..Default::default()
                }
            }
            Episode::Lander(stepper) => stepper.metrics(s.episode_id),
        };
        // nav goals are server-assigned, so the demonstration is already labeled
        let label_prompt = s.env == EnvKind::Lander;
        if label_prompt {
            s.phase = Phase::AwaitingLabel;
        } else {
            s.phase = Phase::Finished;
            self.log.append(s.demo.clone());
        }
        ServerMessage::Summary {
            v: PROTOCOL_VERSION,
            session: s.id,
            env: s.env.name().into(),
            condition: s.condition.name().into(),
            root_seed: s.root_seed,
            episode: s.episode_id,
            metrics,
            label_prompt,
        }
    }

    /// Logs a finished but never labeled demonstration.
    fn retire(&self, s: &mut Session) {
        if s.phase == Phase::AwaitingLabel {
            s.demo.task = Task::Label {
                label: "unlabeled".into(),
            };
            s.phase = Phase::Finished;
            self.log.append(s.demo.clone());
        }
    }

    fn sweep_expired(&self) {
        let timeout = self.timeout();
        let expired: Vec<Arc<Mutex<Session>>> = {
            let mut table = self.sessions.lock().expect("session table");
            let ids: Vec<Uuid> = table
                .iter()
                .filter(|(_, s)| s.lock().expect("session").last_seen.elapsed() > timeout)
                .map(|(id, _)| *id)
                .collect();
            ids.iter().filter_map(|id| table.remove(id)).collect()
        };
        for s in expired {
            self.retire(&mut s.lock().expect("session"));
        }
    }
}

impl Drop for SessionManager {
    fn drop(&mut self) {
        let sessions: Vec<_> = self.sessions.lock().expect("session table").drain().map(|(_, s)| s).collect();
        for s in sessions {
            self.retire(&mut s.lock().expect("session"));
        }
    }
}

fn read_theta_file(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| (ErrorCode::MissingModel, format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| (ErrorCode::MissingModel, format!("{}: {e}", path.display())))?;
    let array = value.get("theta_hat").unwrap_or(&value);
    serde_json::from_value(array.clone())
        .map_err(|e| (ErrorCode::MissingModel, format!("{}: expected a parameter array: {e}", path.display())))
}
