//! Random grid layouts.
//!
//! Two profiles: a wall-free 5x5 map with three equal object categories, and
//! a larger floorplan of rooms, furniture blocks and landmarks sized to 410
//! free cells (1640 states) and 34 objects.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid_nav::{GridMap, MapObject, ObjectCategory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapProfile {
    FiveByFive,
    HabitatScale,
}

impl std::str::FromStr for MapProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "five_by_five" | "5x5" | "five-by-five" => Ok(MapProfile::FiveByFive),
            "habitat_scale" | "habitat" | "habitat-scale" => Ok(MapProfile::HabitatScale),
            other => Err(format!("unknown map profile {other:?}")),
        }
    }
}

pub fn generate(profile: MapProfile, seed: u64) -> GridMap {
    match profile {
        MapProfile::FiveByFive => five_by_five(seed, 26),
        MapProfile::HabitatScale => habitat_scale(seed),
    }
}

/// 5x5 grid, no walls, `per_category` objects in each of the three categories.
/// Objects are listed category (a) first, then (b), then (c).
pub fn five_by_five(seed: u64, per_category: usize) -> GridMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (5usize, 5usize);
    let random_cell = |rng: &mut ChaCha8Rng| [rng.random_range(0..w), rng.random_range(0..h)];
    let mut objects = Vec::with_capacity(per_category * 3);
    for i in 0..per_category {
        objects.push(MapObject {
            id: format!("unknown_{i:02}"),
            category: ObjectCategory::UniqueUnknown,
            cells: vec![random_cell(&mut rng)],
        });
    }
    for i in 0..per_category {
        let count = rng.random_range(2..=3);
        let mut cells: Vec<[usize; 2]> = Vec::with_capacity(count);
        while cells.len() < count {
            let c = random_cell(&mut rng);
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        objects.push(MapObject {
            id: format!("common_{i:02}"),
            category: ObjectCategory::DuplicatedKnown,
            cells,
        });
    }
    for i in 0..per_category {
        objects.push(MapObject {
            id: format!("landmark_{i:02}"),
            category: ObjectCategory::UniqueKnown,
            cells: vec![random_cell(&mut rng)],
        });
    }
    GridMap {
        width: w,
        height: h,
        objects,
        walls: Vec::new(),
        view_range: 1,
    }
}

const HABITAT_FREE_CELLS: usize = 410;

/// Names for the 31 non-structural habitat objects. The first
/// `HABITAT_LANDMARKS` become single wall-mounted landmarks, the rest are
/// furniture types spread over several floor cells.
const HABITAT_NAMES: [&str; 31] = [
    "painting", "fireplace", "aquarium", "piano", "chair", "table", "plant", "lamp", "sofa", "cabinet", "bed",
    "shelf", "counter", "stool", "bench", "television", "fridge", "sink", "bathtub", "mirror", "clock", "statue",
    "washer", "desk", "wardrobe", "grill", "rug", "telescope", "bookcase", "shower", "gym_equipment",
];

const HABITAT_LANDMARKS: usize = 4;

/// Floorplan with outer walls, a 3x2 arrangement of rooms chained by doors and
/// furniture blocks removed from the floor until 410 free cells remain.
pub fn habitat_scale(seed: u64) -> GridMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (32usize, 22usize);
    let mut wall = vec![false; w * h];
    let idx = |x: usize, y: usize| y * w + x;
    for x in 0..w {
        wall[idx(x, 0)] = true;
        wall[idx(x, h - 1)] = true;
    }
    for y in 0..h {
        wall[idx(0, y)] = true;
        wall[idx(w - 1, y)] = true;
    }
    let vx = [rng.random_range(9..13), rng.random_range(19..23)];
    let hy = rng.random_range(9..13);
    for &x in &vx {
        for y in 1..h - 1 {
            wall[idx(x, y)] = true;
        }
    }
    for x in 1..w - 1 {
        wall[idx(x, hy)] = true;
    }
    let mut doors = Vec::new();
    // doors through each vertical wall, above and below the horizontal wall
    for &x in &vx {
        for (lo, hi) in [(1, hy), (hy + 1, h - 1)] {
            let y = rng.random_range(lo + 1..hi - 1);
            doors.push((x, y));
        }
    }
    // a single door through the horizontal wall, in the last room column, so
    // the six rooms form one chain
    let x = rng.random_range(vx[1] + 2..w - 2);
    doors.push((x, hy));
    for &(x, y) in &doors {
        wall[idx(x, y)] = false;
    }
    let structural = wall.clone();

    let free_count = |wall: &[bool]| wall.iter().filter(|&&b| !b).count();
    let connected = |wall: &[bool]| -> bool {
        let total = free_count(wall);
        let Some(start) = wall.iter().position(|&b| !b) else {
            return false;
        };
        let mut seen = vec![false; w * h];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut count = 1;
        while let Some(c) = queue.pop_front() {
            let (x, y) = (c % w, c / w);
            let nbrs = [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)];
            for (nx, ny) in nbrs {
                let n = idx(nx, ny);
                if !wall[n] && !seen[n] {
                    seen[n] = true;
                    count += 1;
                    queue.push_back(n);
                }
            }
        }
        count == total
    };

    let mut furniture_cells = Vec::new();
    let door_set: Vec<usize> = doors.iter().map(|&(x, y)| idx(x, y)).collect();
    let mut candidates: Vec<usize> = (0..w * h).filter(|&c| !wall[c]).collect();
    candidates.shuffle(&mut rng);
    let mut cursor = 0;
    while free_count(&wall) > HABITAT_FREE_CELLS {
        if cursor >= candidates.len() {
            candidates.shuffle(&mut rng);
            cursor = 0;
        }
        let c = candidates[cursor];
        cursor += 1;
        if wall[c] {
            continue;
        }
        let (x, y) = (c % w, c / w);
        let near_door = door_set
            .iter()
            .any(|&d| (d % w).abs_diff(x) + (d / w).abs_diff(y) <= 1);
        if near_door {
            continue;
        }
        wall[c] = true;
        if connected(&wall) {
            furniture_cells.push([x, y]);
        } else {
            wall[c] = false;
        }
    }

    // structural wall cells that border the floor
    let mut wall_faces = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !structural[idx(x, y)] {
                continue;
            }
            let borders = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && !wall[idx(nx as usize, ny as usize)]
            });
            if borders {
                wall_faces.push([x, y]);
            }
        }
    }
    // furniture stands on the floor, so its cells carry both objects
    let floor: Vec<[usize; 2]> = (0..w * h)
        .filter(|&c| !structural[c])
        .map(|c| [c % w, c / w])
        .collect();

    let mut objects = vec![
        MapObject {
            id: "wall".into(),
            category: ObjectCategory::DuplicatedKnown,
            cells: wall_faces.clone(),
        },
        MapObject {
            id: "floor".into(),
            category: ObjectCategory::DuplicatedKnown,
            cells: floor,
        },
        MapObject {
            id: "door".into(),
            category: ObjectCategory::DuplicatedKnown,
            cells: doors.iter().map(|&(x, y)| [x, y]).collect(),
        },
    ];

    furniture_cells.shuffle(&mut rng);
    let (landmarks, furniture) = HABITAT_NAMES.split_at(HABITAT_LANDMARKS);
    let mut groups: Vec<Vec<[usize; 2]>> = vec![Vec::new(); furniture.len()];
    for (i, cell) in furniture_cells.iter().enumerate() {
        groups[i % furniture.len()].push(*cell);
    }
    for (name, cells) in furniture.iter().zip(groups) {
        objects.push(MapObject {
            id: (*name).into(),
            category: ObjectCategory::DuplicatedKnown,
            cells,
        });
    }

    let mut faces = wall_faces;
    faces.shuffle(&mut rng);
    for (name, cell) in landmarks.iter().zip(faces) {
        objects.push(MapObject {
            id: (*name).into(),
            category: ObjectCategory::UniqueKnown,
            cells: vec![cell],
        });
    }

    let walls = (0..w * h)
        .filter(|&c| wall[c])
        .map(|c| [c % w, c / w])
        .collect();
    GridMap {
        width: w,
        height: h,
        objects,
        walls,
        view_range: 2,
    }
}
