//! Grid navigation with object landmarks.
//!
//! A state is a free cell plus one of four headings. North decreases the row
//! index. Objects sit on cells (free or wall) and are visible from a state when
//! they lie on the ray in front of it, up to `view_range` cells, with walls
//! blocking everything behind them.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EnvError, Result};
use crate::belief::Transition;
use crate::policy::DeterministicMdp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectCategory {
    /// Unique, absent from the user's mental map.
    #[serde(rename = "a")]
    UniqueUnknown,
    /// Several placements, known to the user.
    #[serde(rename = "b")]
    DuplicatedKnown,
    /// Unique and known.
    #[serde(rename = "c")]
    UniqueKnown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Heading {
        Self::ALL[i % 4]
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn left(self) -> Heading {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Heading {
        Self::from_index(self.index() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavAction {
    TurnLeft,
    TurnRight,
    MoveForward,
    Wait,
}

impl NavAction {
    pub const ALL: [NavAction; 4] = [
        NavAction::TurnLeft,
        NavAction::TurnRight,
        NavAction::MoveForward,
        NavAction::Wait,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<NavAction> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapObject {
    pub id: String,
    pub category: ObjectCategory,
    /// `[x, y]` placements.
    pub cells: Vec<[usize; 2]>,
}

fn default_view_range() -> usize {
    1
}

/// JSON map file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<MapObject>,
    #[serde(default)]
    pub walls: Vec<[usize; 2]>,
    #[serde(default = "default_view_range")]
    pub view_range: usize,
}

impl GridMap {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    /// Hex SHA-256 of the compact JSON encoding; keys Q-table caches.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("map serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Grid navigation environment with precomputed transitions and visibility.
#[derive(Debug, Clone)]
pub struct GridNavEnv {
    map: GridMap,
    allow_wait: bool,
    /// Free-cell index for every grid cell, `None` for walls.
    cell_index: Vec<Option<usize>>,
    cells: Vec<(usize, usize)>,
    next: Vec<[usize; 4]>,
    visible: Vec<Vec<ObjectId>>,
    seen_from: Vec<Vec<usize>>,
}

impl GridNavEnv {
    pub fn new(map: GridMap, allow_wait: bool) -> Result<Self> {
        let invalid = |m: String| Err(EnvError::InvalidMap(m));
        if map.width == 0 || map.height == 0 {
            return invalid("width and height must be positive".into());
        }
        if map.view_range == 0 {
            return invalid("view_range must be positive".into());
        }
        let in_bounds = |c: &[usize; 2]| c[0] < map.width && c[1] < map.height;
        let mut is_wall = vec![false; map.width * map.height];
        for w in &map.walls {
            if !in_bounds(w) {
                return invalid(format!("wall {w:?} out of bounds"));
            }
            is_wall[w[1] * map.width + w[0]] = true;
        }
        let mut names = std::collections::HashSet::new();
        for obj in &map.objects {
            if !names.insert(obj.id.as_str()) {
                return invalid(format!("duplicate object id {}", obj.id));
            }
            if let Some(c) = obj.cells.iter().find(|c| !in_bounds(c)) {
                return invalid(format!("object {} placed out of bounds at {c:?}", obj.id));
            }
            let placements = obj.cells.len();
            let ok = match obj.category {
                ObjectCategory::UniqueUnknown | ObjectCategory::UniqueKnown => placements == 1,
                ObjectCategory::DuplicatedKnown => placements >= 2,
            };
            if !ok {
                return invalid(format!(
                    "object {} of category {:?} has {placements} placements",
                    obj.id, obj.category
                ));
            }
        }

        let mut cell_index = vec![None; map.width * map.height];
        let mut cells = Vec::new();
        for y in 0..map.height {
            for x in 0..map.width {
                if !is_wall[y * map.width + x] {
                    cell_index[y * map.width + x] = Some(cells.len());
                    cells.push((x, y));
                }
            }
        }
        if cells.is_empty() {
            return invalid("map has no free cells".into());
        }

        let mut objects_at: Vec<Vec<ObjectId>> = vec![Vec::new(); map.width * map.height];
        for (i, obj) in map.objects.iter().enumerate() {
            for c in &obj.cells {
                let slot = &mut objects_at[c[1] * map.width + c[0]];
                if !slot.contains(&ObjectId(i)) {
                    slot.push(ObjectId(i));
                }
            }
        }

        let num_states = cells.len() * 4;
        let mut next = Vec::with_capacity(num_states);
        let mut visible = Vec::with_capacity(num_states);
        let mut seen_from = vec![Vec::new(); map.objects.len()];
        for (ci, &(x, y)) in cells.iter().enumerate() {
            for heading in Heading::ALL {
                let state = ci * 4 + heading.index();
                let (dx, dy) = heading.delta();
                let ahead = |k: i64| -> Option<(usize, usize)> {
                    let nx = x as i64 + dx * k;
                    let ny = y as i64 + dy * k;
                    if nx < 0 || ny < 0 || nx >= map.width as i64 || ny >= map.height as i64 {
                        None
                    } else {
                        Some((nx as usize, ny as usize))
                    }
                };
                let forward = match ahead(1) {
                    Some((nx, ny)) => match cell_index[ny * map.width + nx] {
                        Some(nci) => nci * 4 + heading.index(),
                        None => state,
                    },
                    None => state,
                };
                next.push([
                    ci * 4 + heading.left().index(),
                    ci * 4 + heading.right().index(),
                    forward,
                    state,
                ]);

                let mut vis: Vec<ObjectId> = Vec::new();
                for k in 1..=map.view_range as i64 {
                    let Some((nx, ny)) = ahead(k) else { break };
                    let flat = ny * map.width + nx;
                    vis.extend(objects_at[flat].iter().copied());
                    if is_wall[flat] {
                        break;
                    }
                }
                vis.sort();
                vis.dedup();
                for o in &vis {
                    seen_from[o.0].push(state);
                }
                visible.push(vis);
            }
        }

        Ok(Self {
            map,
            allow_wait,
            cell_index,
            cells,
            next,
            visible,
            seen_from,
        })
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn allow_wait(&self) -> bool {
        self.allow_wait
    }

    pub fn num_states(&self) -> usize {
        self.cells.len() * 4
    }

    pub fn num_actions(&self) -> usize {
        if self.allow_wait {
            4
        } else {
            3
        }
    }

    pub fn num_objects(&self) -> usize {
        self.map.objects.len()
    }

    pub fn object(&self, id: ObjectId) -> &MapObject {
        &self.map.objects[id.0]
    }

    pub fn object_by_name(&self, name: &str) -> Option<ObjectId> {
        self.map.objects.iter().position(|o| o.id == name).map(ObjectId)
    }

    pub fn objects_in(&self, category: ObjectCategory) -> Vec<ObjectId> {
        (0..self.map.objects.len())
            .filter(|&i| self.map.objects[i].category == category)
            .map(ObjectId)
            .collect()
    }

    pub fn free_cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn state_of(&self, x: usize, y: usize, heading: Heading) -> Option<usize> {
        if x >= self.map.width || y >= self.map.height {
            return None;
        }
        self.cell_index[y * self.map.width + x].map(|ci| ci * 4 + heading.index())
    }

    /// `(x, y, heading)` of a state id.
    pub fn decode(&self, state: usize) -> (usize, usize, Heading) {
        let (x, y) = self.cells[state / 4];
        (x, y, Heading::from_index(state % 4))
    }

    pub fn cell_of(&self, state: usize) -> (usize, usize) {
        self.cells[state / 4]
    }

    pub fn is_free(&self, x: usize, y: usize) -> bool {
        x < self.map.width && y < self.map.height && self.cell_index[y * self.map.width + x].is_some()
    }

    /// The four states located on a free cell.
    pub fn goal_states(&self, cell: (usize, usize)) -> Vec<usize> {
        match self.state_of(cell.0, cell.1, Heading::North) {
            Some(s) => (s..s + 4).collect(),
            None => Vec::new(),
        }
    }

    pub fn next_state(&self, state: usize, action: usize) -> usize {
        self.next[state][action]
    }

    /// Deterministic transition. Reward is `step_penalty` per step; terminal once
    /// the next state lies on `goal`.
    pub fn step(
        &self,
        state: usize,
        action: usize,
        goal: (usize, usize),
        step_penalty: f64,
    ) -> Result<(usize, f64, bool)> {
        if state >= self.num_states() {
            return Err(EnvError::InvalidState(state));
        }
        if action >= self.num_actions() {
            return Err(EnvError::InvalidAction {
                action,
                num_actions: self.num_actions(),
            });
        }
        let next = self.next[state][action];
        Ok((next, step_penalty, self.cell_of(next) == goal))
    }

    /// Full visible object set (sorted), as seen by the assistant.
    pub fn full_observe(&self, state: usize) -> &[ObjectId] {
        &self.visible[state]
    }

    /// Ambient observation: one visible object sampled uniformly, `None` when
    /// nothing is in view.
    pub fn observe<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Option<ObjectId> {
        let vis = &self.visible[state];
        if vis.is_empty() {
            None
        } else {
            Some(vis[rng.random_range(0..vis.len())])
        }
    }

    /// States from which `object` is visible.
    pub fn seen_from(&self, object: ObjectId) -> &[usize] {
        &self.seen_from[object.0]
    }

    /// Assistant likelihood for a full observation: `1[visible(s) == set]`.
    pub fn full_set_likelihood(&self, set: &[ObjectId]) -> Vec<f64> {
        self.visible
            .iter()
            .map(|v| if v.as_slice() == set { 1.0 } else { 0.0 })
            .collect()
    }

    /// Unbiased singleton observation model `p(o | s)`: uniform over the visible set.
    pub fn singleton_likelihood(&self, observation: Option<ObjectId>) -> Vec<f64> {
        self.visible
            .iter()
            .map(|v| match observation {
                None => {
                    if v.is_empty() {
                        1.0
                    } else {
                        0.0
                    }
                }
                Some(o) => {
                    if v.contains(&o) {
                        1.0 / v.len() as f64
                    } else {
                        0.0
                    }
                }
            })
            .collect()
    }

    /// Shortest 4-connected path length over free cells from every free cell to `goal`.
    pub fn cell_distances(&self, goal: (usize, usize)) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cells.len()];
        let Some(start) = self.cell_index[goal.1 * self.map.width + goal.0] else {
            return dist;
        };
        dist[start] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some(ci) = queue.pop_front() {
            let (x, y) = self.cells[ci];
            let d = dist[ci].unwrap();
            for h in Heading::ALL {
                let (dx, dy) = h.delta();
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= self.map.width as i64 || ny >= self.map.height as i64 {
                    continue;
                }
                if let Some(nci) = self.cell_index[ny as usize * self.map.width + nx as usize] {
                    if dist[nci].is_none() {
                        dist[nci] = Some(d + 1);
                        queue.push_back(nci);
                    }
                }
            }
        }
        dist
    }

    pub fn cell_distance(&self, distances: &[Option<usize>], cell: (usize, usize)) -> Option<usize> {
        self.cell_index[cell.1 * self.map.width + cell.0].and_then(|ci| distances[ci])
    }

    /// Minimum number of actions from each state to reach any state in `goals`.
    pub fn action_distances(&self, goals: &[usize]) -> Vec<Option<usize>> {
        let n = self.num_states();
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in 0..n {
            for a in 0..3 {
                reverse[self.next[s][a]].push(s);
            }
        }
        let mut dist = vec![None; n];
        let mut queue = VecDeque::new();
        for &g in goals {
            dist[g] = Some(0);
            queue.push_back(g);
        }
        while let Some(s) = queue.pop_front() {
            let d = dist[s].unwrap();
            for &p in &reverse[s] {
                if dist[p].is_none() {
                    dist[p] = Some(d + 1);
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

impl Transition for GridNavEnv {
    fn num_states(&self) -> usize {
        GridNavEnv::num_states(self)
    }

    fn num_actions(&self) -> usize {
        GridNavEnv::num_actions(self)
    }

    fn propagate(&self, probs: &[f64], action: usize) -> Vec<f64> {
        let mut out = vec![0.0; probs.len()];
        for (s, &p) in probs.iter().enumerate() {
            if p != 0.0 {
                out[self.next[s][action]] += p;
            }
        }
        out
    }
}

impl DeterministicMdp for GridNavEnv {
    fn num_states(&self) -> usize {
        GridNavEnv::num_states(self)
    }

    fn num_actions(&self) -> usize {
        GridNavEnv::num_actions(self)
    }

    fn next_state(&self, state: usize, action: usize) -> usize {
        self.next[state][action]
    }
}
