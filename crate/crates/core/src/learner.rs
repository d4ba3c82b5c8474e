//! Maximum-likelihood fitting of user belief-update models from demonstrated
//! actions on known tasks.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::Transition;
use crate::env::{GridNavEnv, LanderAction, ObjectId};
use crate::user::{logistic, BoltzmannPolicy, ThetaLayout, UserError, WeightedObsUser};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("log-likelihood is -inf for every parameter tried")]
    Unfittable,
    #[error("expected {expected} parameters, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("demonstration {episode}: {reason}")]
    BadDemonstration { episode: u64, reason: String },
    #[error(transparent)]
    User(#[from] UserError),
    #[error("demonstration log: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LearnError>;

/// The task a demonstration was trying to accomplish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    GoalCell { x: usize, y: usize },
    Label { label: String },
}

/// What the user was shown at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShownObservation {
    /// Object mentions by catalog index; empty means "nothing".
    Objects { ids: Vec<usize> },
    /// Tilt indicator angle.
    Angle { value: f64 },
    Row { row: usize, pixels: Vec<bool> },
    TrackView { offsets: Vec<f64>, heading: f64, delayed: bool },
}

/// One episode of shown observations, actions and its task label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub episode_id: u64,
    pub env: String,
    pub task: Task,
    pub observations: Vec<ShownObservation>,
    pub actions: Vec<usize>,
}

impl Demonstration {
    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.actions.len() {
            return Err(LearnError::BadDemonstration {
                episode: self.episode_id,
                reason: format!(
                    "{} observations but {} actions",
                    self.observations.len(),
                    self.actions.len()
                ),
            });
        }
        Ok(())
    }
}

pub fn write_demonstrations<W: Write>(mut w: W, demos: &[Demonstration]) -> Result<()> {
    for d in demos {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_demonstrations<R: BufRead>(r: R) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Demonstration = serde_json::from_str(&line)?;
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

/// A parameterized family of user models with a per-demonstration
/// log-likelihood and its gradient.
pub trait LikelihoodFamily: Sync {
    fn dim(&self) -> usize;
    /// Box constraint applied to every parameter, if any.
    fn bounds(&self) -> Option<(f64, f64)>;
    /// Per-step action probabilities of one demonstration (steps the model
    /// excludes are omitted).
    fn step_probabilities(&self, theta: &[f64], demo: &Demonstration) -> Result<Vec<f64>>;
    /// Log-likelihood and gradient of one demonstration.
    fn log_likelihood(&self, theta: &[f64], demo: &Demonstration) -> Result<(f64, Vec<f64>)>;

    /// Log-likelihood alone.
    fn log_likelihood_value(&self, theta: &[f64], demo: &Demonstration) -> Result<f64> {
        Ok(self.log_likelihood(theta, demo)?.0)
    }
}

/// Total log-likelihood and gradient over a dataset.
pub fn dataset_log_likelihood<F: LikelihoodFamily>(
    family: &F,
    theta: &[f64],
    data: &[Demonstration],
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != family.dim() {
        return Err(LearnError::DimensionMismatch {
            expected: family.dim(),
            found: theta.len(),
        });
    }
    let parts: Vec<(f64, Vec<f64>)> = data
        .par_iter()
        .map(|d| family.log_likelihood(theta, d))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; family.dim()];
    for (ll, g) in parts {
        total += ll;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    if total == f64::NEG_INFINITY {
        grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok((total, grad))
}

/// Nav family: weighted-observation users acting through goal-conditioned
/// Boltzmann policies computed in hindsight for each demonstration's goal.
pub struct NavFamily<'a> {
    pub env: &'a GridNavEnv,
    pub layout: ThetaLayout,
    pub max_items: usize,
    pub policies: HashMap<(usize, usize), Arc<BoltzmannPolicy>>,
}

impl NavFamily<'_> {
    fn policy(&self, demo: &Demonstration) -> Result<&BoltzmannPolicy> {
        match &demo.task {
            Task::GoalCell { x, y } => self.policies.get(&(*x, *y)).map(|p| p.as_ref()).ok_or_else(|| {
                LearnError::BadDemonstration {
                    episode: demo.episode_id,
                    reason: format!("no policy for goal ({x}, {y})"),
                }
            }),
            Task::Label { .. } => Err(LearnError::BadDemonstration {
                episode: demo.episode_id,
                reason: "nav demonstration needs a goal cell".into(),
            }),
        }
    }

    /// Replays the demonstration, returning per-step action probabilities,
    /// their theta-gradients and the total log-likelihood.
    fn replay(&self, theta: &[f64], demo: &Demonstration, with_grad: bool) -> Result<(Vec<f64>, f64, Vec<f64>)> {
        demo.validate()?;
        let env = self.env;
        let k = self.layout.dim(env);
        if theta.len() != k {
            return Err(LearnError::DimensionMismatch {
                expected: k,
                found: theta.len(),
            });
        }
        let user = WeightedObsUser::from_theta(env, self.layout, theta, self.max_items)?;
        let policy = self.policy(demo)?;
        let n = env.num_states();
        let kd = if with_grad { k } else { 0 };
        let param: Vec<Option<usize>> = (0..env.num_objects())
            .map(|o| self.layout.parameter_of(env, ObjectId(o)))
            .collect();
        // dZ(s)/dtheta_j: number of visible objects tied to parameter j
        let dz = |s: usize, j: usize| -> f64 {
            env.full_observe(s).iter().filter(|o| param[o.0] == Some(j)).count() as f64
        };

        let mut b = vec![1.0 / n as f64; n];
        let mut db = vec![vec![0.0; n]; kd];
        let mut probs = Vec::with_capacity(demo.actions.len());
        let mut ll = 0.0;
        let mut grad = vec![0.0; k];
        for (t, (obs, &action)) in demo.observations.iter().zip(&demo.actions).enumerate() {
            if t > 0 {
                let prev = demo.actions[t - 1];
                b = env.propagate(&b, prev);
                for d in db.iter_mut() {
                    *d = env.propagate(d, prev);
                }
            }
            let ids = match obs {
                ShownObservation::Objects { ids } => ids,
                _ => {
                    return Err(LearnError::BadDemonstration {
                        episode: demo.episode_id,
                        reason: "nav demonstration holds a non-object observation".into(),
                    })
                }
            };
            if let Some(&bad) = ids.iter().find(|&&o| o >= env.num_objects()) {
                return Err(LearnError::BadDemonstration {
                    episode: demo.episode_id,
                    reason: format!("unknown object {bad}"),
                });
            }
            let shown: Vec<ObjectId> = ids.iter().map(|&o| ObjectId(o)).collect();
            if let Some(l) = user.likelihood(env, &shown) {
                let u: Vec<f64> = b.iter().zip(&l).map(|(p, l)| p * l).collect();
                let total: f64 = u.iter().sum();
                if total > 0.0 {
                    let posterior: Vec<f64> = u.iter().map(|x| x / total).collect();
                    for (j, d) in db.iter_mut().enumerate() {
                        // d/dtheta_j of the likelihood for a singleton mention
                        let mut dl = vec![0.0; n];
                        if let [o] = shown.as_slice() {
                            let w = user.weights()[o.0];
                            let dw = if param[o.0] == Some(j) { 1.0 } else { 0.0 };
                            for &s in env.seen_from(*o) {
                                let z = user.normalizer(s);
                                dl[s] = (dw * z - w * dz(s, j)) / (z * z);
                            }
                        }
                        let du: Vec<f64> = (0..n).map(|s| dl[s] * b[s] + l[s] * d[s]).collect();
                        let du_sum: f64 = du.iter().sum();
                        for s in 0..n {
                            d[s] = du[s] / total - posterior[s] * du_sum / total;
                        }
                    }
                    b = posterior;
                }
            }
            if action >= env.num_actions() {
                return Err(LearnError::BadDemonstration {
                    episode: demo.episode_id,
                    reason: format!("action {action} out of range"),
                });
            }
            let mut p = 0.0;
            let mut dp = vec![0.0; kd];
            for s in 0..n {
                if b[s] == 0.0 && db.iter().all(|d| d[s] == 0.0) {
                    continue;
                }
                let pi = policy.state_probs(s)[action];
                p += pi * b[s];
                for (j, d) in db.iter().enumerate() {
                    dp[j] += pi * d[s];
                }
            }
            probs.push(p);
            if p <= 0.0 {
                ll = f64::NEG_INFINITY;
            } else {
                ll += p.ln();
                for j in 0..kd {
                    grad[j] += dp[j] / p;
                }
            }
        }
        Ok((probs, ll, grad))
    }
}

impl LikelihoodFamily for NavFamily<'_> {
    fn dim(&self) -> usize {
        self.layout.dim(self.env)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }

    fn step_probabilities(&self, theta: &[f64], demo: &Demonstration) -> Result<Vec<f64>> {
        Ok(self.replay(theta, demo, false)?.0)
    }

    fn log_likelihood(&self, theta: &[f64], demo: &Demonstration) -> Result<(f64, Vec<f64>)> {
        let (_, ll, grad) = self.replay(theta, demo, true)?;
        Ok((ll, grad))
    }

    fn log_likelihood_value(&self, theta: &[f64], demo: &Demonstration) -> Result<f64> {
        Ok(self.replay(theta, demo, false)?.1)
    }
}

/// Lander family: `theta = (theta0, theta1)` of the logistic percept map and a
/// sigmoid thruster policy with gain `kappa`. No-op steps carry no information
/// about the percept and are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFamily {
    pub kappa: f64,
}

fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl LogisticFamily {
    fn angles(demo: &Demonstration) -> Result<impl Iterator<Item = (f64, LanderAction)> + '_> {
        demo.validate()?;
        for obs in &demo.observations {
            if !matches!(obs, ShownObservation::Angle { .. }) {
                return Err(LearnError::BadDemonstration {
                    episode: demo.episode_id,
                    reason: "lander demonstration holds a non-angle observation".into(),
                });
            }
        }
        if let Some(&a) = demo.actions.iter().find(|&&a| LanderAction::from_index(a).is_none()) {
            return Err(LearnError::BadDemonstration {
                episode: demo.episode_id,
                reason: format!("action {a} out of range"),
            });
        }
        Ok(demo
            .observations
            .iter()
            .zip(&demo.actions)
            .filter_map(|(o, &a)| match (o, LanderAction::from_index(a)) {
                (ShownObservation::Angle { value }, Some(action)) if action != LanderAction::NoOp => {
                    Some((*value, action))
                }
                _ => None,
            }))
    }
}

impl LikelihoodFamily for LogisticFamily {
    fn dim(&self) -> usize {
        2
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        None
    }

    fn step_probabilities(&self, theta: &[f64], demo: &Demonstration) -> Result<Vec<f64>> {
        let user = crate::user::DistortedPerceptUser {
            theta0: theta[0],
            theta1: theta[1],
        };
        Ok(Self::angles(demo)?
            .map(|(o, a)| {
                let right = crate::user::lander_fire_right_prob(user.percept(o), self.kappa);
                if a == LanderAction::FireRight {
                    right
                } else {
                    1.0 - right
                }
            })
            .collect())
    }

    fn log_likelihood(&self, theta: &[f64], demo: &Demonstration) -> Result<(f64, Vec<f64>)> {
        if theta.len() != 2 {
            return Err(LearnError::DimensionMismatch {
                expected: 2,
                found: theta.len(),
            });
        }
        let mut ll = 0.0;
        let mut grad = vec![0.0; 2];
        for (o, a) in Self::angles(demo)? {
            let g = logistic(theta[0] + theta[1] * o);
            let percept = -PI + 2.0 * PI * g;
            let dpercept = 2.0 * PI * g * (1.0 - g);
            let sign = if a == LanderAction::FireRight { 1.0 } else { -1.0 };
            let x = sign * self.kappa * percept;
            ll += ln_sigmoid(x);
            // d ln sigmoid(x) / dx = 1 - sigmoid(x)
            let dx = (1.0 - logistic(x)) * sign * self.kappa * dpercept;
            grad[0] += dx;
            grad[1] += dx * o;
        }
        Ok((ll, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub initial_step: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Resolution of the certifying grid scan for one-dimensional boxed families.
    pub grid_resolution: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.01,
            max_iterations: 2000,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-9,
            grid_resolution: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub log_likelihood: f64,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    /// `(theta, log-likelihood)` pairs of the grid scan, when one ran.
    pub grid_scan: Option<Vec<(f64, f64)>>,
}

fn project(theta: &mut [f64], bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        theta.iter_mut().for_each(|t| *t = t.clamp(lo, hi));
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected gradient ascent with backtracking step halving; one-dimensional
/// boxed families are additionally certified by a dense grid scan.
pub fn fit_user_model<F: LikelihoodFamily>(
    family: &F,
    data: &[Demonstration],
    init: &[f64],
    config: &OptimizerConfig,
) -> Result<FitResult> {
    if data.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let bounds = family.bounds();
    let mut theta = init.to_vec();
    project(&mut theta, bounds);
    let (mut ll, mut grad) = dataset_log_likelihood(family, &theta, data)?;
    let mut step = config.initial_step;
    let mut trace = Vec::new();
    let mut converged = false;
    for iteration in 0..config.max_iterations {
        // projected gradient as the stationarity measure
        let mut probe: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + g).collect();
        project(&mut probe, bounds);
        let pg: Vec<f64> = probe.iter().zip(&theta).map(|(p, t)| p - t).collect();
        let gnorm = norm(&pg);
        trace.push(TraceEntry {
            iteration,
            theta: theta.clone(),
            log_likelihood: ll,
            gradient_norm: gnorm,
            step,
        });
        if ll.is_finite() && gnorm < config.gradient_tolerance {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step * norm(&grad) >= config.step_tolerance {
            let mut cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g).collect();
            project(&mut cand, bounds);
            let moved = norm(&cand.iter().zip(&theta).map(|(a, b)| a - b).collect::<Vec<_>>());
            if moved < config.step_tolerance {
                break;
            }
            let (cll, cgrad) = dataset_log_likelihood(family, &cand, data)?;
            if cll >= ll {
                theta = cand;
                ll = cll;
                grad = cgrad;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = ll.is_finite();
            break;
        }
    }

    let mut grid_scan = None;
    if family.dim() == 1 {
        if let Some((lo, hi)) = bounds {
            let count = ((hi - lo) / config.grid_resolution).round() as usize;
            let points: Vec<f64> = (0..=count)
                .map(|i| (lo + i as f64 * config.grid_resolution).min(hi))
                .collect();
            let scan: Vec<(f64, f64)> = points
                .iter()
                .map(|&p| {
                    let l = data
                        .par_iter()
                        .map(|d| family.log_likelihood_value(&[p], d))
                        .collect::<Result<Vec<f64>>>()?;
                    Ok((p, l.iter().sum()))
                })
                .collect::<Result<_>>()?;
            if let Some(&(p, l)) = scan.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0))) {
                if l > ll {
                    theta = vec![p];
                    ll = l;
                }
            }
            grid_scan = Some(scan);
        }
    }
    if ll == f64::NEG_INFINITY {
        return Err(LearnError::Unfittable);
    }
    Ok(FitResult {
        theta_hat: theta,
        log_likelihood: ll,
        trace,
        converged,
        grid_scan,
    })
}

/// Appends a labeled episode and refits, warm-started from `current`.
pub fn run_online_update<F: LikelihoodFamily>(
    family: &F,
    current: &[f64],
    episode: Demonstration,
    dataset: &mut Vec<Demonstration>,
    config: &OptimizerConfig,
) -> Result<FitResult> {
    episode.validate()?;
    dataset.push(episode);
    fit_user_model(family, dataset, current, config)
}

/// Mean absolute gap between two percept curves over a uniform grid of `o`.
pub fn percept_curve_error(a: (f64, f64), b: (f64, f64), lo: f64, hi: f64, points: usize) -> f64 {
    let ua = crate::user::DistortedPerceptUser {
        theta0: a.0,
        theta1: a.1,
    };
    let ub = crate::user::DistortedPerceptUser {
        theta0: b.0,
        theta1: b.1,
    };
    (0..points)
        .map(|i| {
            let o = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            (ua.percept(o) - ub.percept(o)).abs()
        })
        .sum::<f64>()
        / points as f64
}
