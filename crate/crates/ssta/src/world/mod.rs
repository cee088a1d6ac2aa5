//! Seeded synthetic multi-view traffic world.
//!
//! Vehicles move along a grid road network at integer speeds, turning
//! uniformly at intersections and respawning when they leave the grid.
//! Cameras observe fixed windows of the grid and render single-channel
//! occupancy frames with a fixed palette: background 0.0, road 0.3,
//! vehicle 1.0.

mod dataset;
mod topology;

pub use dataset::{generate_dataset, Dataset};
pub use topology::{build_topology, Topology};

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const BACKGROUND: Scalar = 0.0;
pub const ROAD: Scalar = 0.3;
pub const VEHICLE: Scalar = 1.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("vehicle {id} stepped onto non-road cell ({x},{y}); the map is inconsistent")]
    OffRoad { id: u32, x: usize, y: usize },
    #[error("no legal continuation at intersection ({x},{y})")]
    NoContinuation { x: usize, y: usize },
    #[error("invalid world config: {0}")]
    BadConfig(String),
    #[error("topology needs k < view count, got k={k} with {n} views")]
    KTooLarge { k: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    North,
    South,
    East,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::South, Heading::East, Heading::West];

    /// (dx, dy) with y growing downward.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (0, -1),
            Heading::South => (0, 1),
            Heading::East => (1, 0),
            Heading::West => (-1, 0),
        }
    }

    pub fn reverse(self) -> Heading {
        match self {
            Heading::North => Heading::South,
            Heading::South => Heading::North,
            Heading::East => Heading::West,
            Heading::West => Heading::East,
        }
    }
}

/// Axis-aligned road segment, inclusive on both ends.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Segment {
    pub from: (usize, usize),
    pub to: (usize, usize),
}

impl Segment {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Self {
        Segment { from, to }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpawnPoint {
    pub cell: (usize, usize),
    pub heading: Heading,
}

/// One camera's axis-aligned window onto the global grid.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ViewSpec {
    /// 1-based view id, unique across the network.
    pub id: usize,
    pub origin: (usize, usize),
    pub size: (usize, usize),
}

impl ViewSpec {
    /// Window center, used for Manhattan-distance topology building.
    pub fn center(&self) -> (usize, usize) {
        (self.origin.0 + self.size.0 / 2, self.origin.1 + self.size.1 / 2)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.origin.0
            && x < self.origin.0 + self.size.0
            && y >= self.origin.1
            && y < self.origin.1 + self.size.1
    }
}

/// Serializable description of a world; `config.json` in datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: (usize, usize),
    pub roads: Vec<Segment>,
    pub spawns: Vec<SpawnPoint>,
    pub views: Vec<ViewSpec>,
    pub vehicles: usize,
    /// Cycled over vehicles at placement; all entries ≥ 1.
    pub speeds: Vec<usize>,
    pub seed: u64,
    /// Steps within which a vehicle exiting one view is expected to show
    /// up in a graph-adjacent view on the default maps.
    pub transit_bound: usize,
}

#[derive(Clone, Debug)]
pub struct RoadMap {
    pub width: usize,
    pub height: usize,
    road: Vec<bool>,
    intersection: Vec<bool>,
    pub spawns: Vec<SpawnPoint>,
}

impl RoadMap {
    pub fn from_config(cfg: &WorldConfig) -> Result<Self> {
        let (width, height) = cfg.grid;
        if width == 0 || height == 0 {
            return Err(WorldError::BadConfig("empty grid".into()));
        }
        let mut road = vec![false; width * height];
        for seg in &cfg.roads {
            let (x0, y0) = seg.from;
            let (x1, y1) = seg.to;
            if x0 != x1 && y0 != y1 {
                return Err(WorldError::BadConfig(format!(
                    "segment {:?} -> {:?} is not axis-aligned",
                    seg.from, seg.to
                )));
            }
            if x1.max(x0) >= width || y1.max(y0) >= height {
                return Err(WorldError::BadConfig(format!(
                    "segment {:?} -> {:?} leaves the {width}x{height} grid",
                    seg.from, seg.to
                )));
            }
            for y in y0.min(y1)..=y0.max(y1) {
                for x in x0.min(x1)..=x0.max(x1) {
                    road[y * width + x] = true;
                }
            }
        }
        // Intersections: ≥3 road neighbors, or exactly 2 that are not
        // collinear (turn corners).
        let is_road = |x: isize, y: isize| {
            x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height
                && road[y as usize * width + x as usize]
        };
        let mut intersection = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                if !road[y * width + x] {
                    continue;
                }
                let n = is_road(x as isize, y as isize - 1);
                let s = is_road(x as isize, y as isize + 1);
                let e = is_road(x as isize + 1, y as isize);
                let w = is_road(x as isize - 1, y as isize);
                let count = [n, s, e, w].iter().filter(|v| **v).count();
                let corner = count == 2 && !((n && s) || (e && w));
                intersection[y * width + x] = count >= 3 || corner;
            }
        }
        let map = RoadMap {
            width,
            height,
            road,
            intersection,
            spawns: cfg.spawns.clone(),
        };
        for sp in &map.spawns {
            if !map.is_road(sp.cell.0, sp.cell.1) {
                return Err(WorldError::BadConfig(format!(
                    "spawn point {:?} is not on a road cell",
                    sp.cell
                )));
            }
        }
        for view in &cfg.views {
            if view.origin.0 + view.size.0 > width || view.origin.1 + view.size.1 > height {
                return Err(WorldError::BadConfig(format!(
                    "view {} window leaves the grid",
                    view.id
                )));
            }
        }
        let ids: BTreeSet<usize> = cfg.views.iter().map(|v| v.id).collect();
        if ids.len() != cfg.views.len() {
            return Err(WorldError::BadConfig("duplicate view ids".into()));
        }
        Ok(map)
    }

    pub fn is_road(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.road[y * self.width + x]
    }

    pub fn is_intersection(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.intersection[y * self.width + x]
    }

    pub fn road_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |y| {
            (0..self.width).filter_map(move |x| self.road[y * self.width + x].then_some((x, y)))
        })
    }

    fn neighbor(&self, x: usize, y: usize, dir: Heading) -> Option<(usize, usize)> {
        let (dx, dy) = dir.delta();
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
            None
        } else {
            Some((nx as usize, ny as usize))
        }
    }

    /// Headings a vehicle may take from an intersection, excluding the
    /// reverse of its current heading.
    fn continuations(&self, x: usize, y: usize, current: Heading) -> Vec<Heading> {
        Heading::ALL
            .into_iter()
            .filter(|&d| d != current.reverse())
            .filter(|&d| {
                self.neighbor(x, y, d)
                    .map(|(nx, ny)| self.is_road(nx, ny))
                    .unwrap_or(false)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vehicle {
    pub id: u32,
    pub pos: (usize, usize),
    pub heading: Heading,
    pub speed: usize,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub map: RoadMap,
    pub vehicles: Vec<Vehicle>,
    pub t: usize,
}

impl WorldState {
    /// Builds the map and places the configured number of vehicles on
    /// random road cells with legal headings, using the config seed.
    pub fn from_config(cfg: &WorldConfig) -> Result<(Self, ChaCha8Rng)> {
        let map = RoadMap::from_config(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let cells: Vec<(usize, usize)> = map.road_cells().collect();
        if cells.is_empty() && cfg.vehicles > 0 {
            return Err(WorldError::BadConfig("vehicles configured but no road cells".into()));
        }
        if cfg.vehicles > 0 && cfg.speeds.iter().any(|&s| s == 0) {
            return Err(WorldError::BadConfig("vehicle speed must be ≥ 1".into()));
        }
        let mut vehicles = Vec::with_capacity(cfg.vehicles);
        for id in 0..cfg.vehicles {
            let (x, y) = cells[rng.gen_range(0..cells.len())];
            let legal: Vec<Heading> = Heading::ALL
                .into_iter()
                .filter(|&d| {
                    map.neighbor(x, y, d)
                        .map(|(nx, ny)| map.is_road(nx, ny))
                        .unwrap_or(false)
                })
                .collect();
            if legal.is_empty() {
                return Err(WorldError::NoContinuation { x, y });
            }
            let heading = legal[rng.gen_range(0..legal.len())];
            let speed = cfg.speeds[id % cfg.speeds.len().max(1)];
            vehicles.push(Vehicle { id: id as u32, pos: (x, y), heading, speed });
        }
        Ok((WorldState { map, vehicles, t: 0 }, rng))
    }
}

/// Advances every vehicle by its speed, one cell at a time: intersections
/// draw the next heading uniformly from legal continuations, leaving the
/// grid respawns the vehicle at a spawn point drawn uniformly.
pub fn step_world<R: Rng>(state: &mut WorldState, rng: &mut R) -> Result<()> {
    let map = &state.map;
    for vehicle in &mut state.vehicles {
        'substeps: for _ in 0..vehicle.speed {
            let (x, y) = vehicle.pos;
            if map.is_intersection(x, y) {
                let options = map.continuations(x, y, vehicle.heading);
                if options.is_empty() {
                    return Err(WorldError::NoContinuation { x, y });
                }
                vehicle.heading = options[rng.gen_range(0..options.len())];
            }
            match map.neighbor(x, y, vehicle.heading) {
                None => {
                    // Left the grid: respawn.
                    let sp = map.spawns[rng.gen_range(0..map.spawns.len())];
                    vehicle.pos = sp.cell;
                    vehicle.heading = sp.heading;
                    break 'substeps;
                }
                Some((nx, ny)) => {
                    if !map.is_road(nx, ny) {
                        return Err(WorldError::OffRoad { id: vehicle.id, x: nx, y: ny });
                    }
                    vehicle.pos = (nx, ny);
                }
            }
        }
    }
    state.t += 1;
    Ok(())
}

/// One rendered observation: a view's `H×W` occupancy grid at a timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub view: usize,
    pub t: usize,
    pub grid: Tensor,
}

pub fn render(state: &WorldState, view: &ViewSpec) -> Frame {
    let (w, h) = view.size;
    let mut data = vec![BACKGROUND; w * h];
    for yy in 0..h {
        for xx in 0..w {
            if state.map.is_road(view.origin.0 + xx, view.origin.1 + yy) {
                data[yy * w + xx] = ROAD;
            }
        }
    }
    for vehicle in &state.vehicles {
        let (vx, vy) = vehicle.pos;
        if view.contains(vx, vy) {
            data[(vy - view.origin.1) * w + (vx - view.origin.0)] = VEHICLE;
        }
    }
    Frame {
        view: view.id,
        t: state.t,
        grid: Tensor::new(vec![h, w], data).expect("palette values are finite"),
    }
}

/// Default desk-scale world presets for 2, 4, or 8 views.
///
/// All presets place every road cell inside some view window so that
/// cross-view transits stay observable. The 8-view map is a closed
/// "ladder": two horizontal avenues crossed by four vertical streets.
pub fn preset(views: usize, seed: u64) -> Result<WorldConfig> {
    let view16 = |id: usize, ox: usize, oy: usize| ViewSpec { id, origin: (ox, oy), size: (16, 16) };
    match views {
        2 => Ok(WorldConfig {
            grid: (32, 16),
            roads: vec![
                Segment::new((0, 7), (31, 7)),
                Segment::new((0, 9), (31, 9)),
            ],
            spawns: vec![
                SpawnPoint { cell: (0, 7), heading: Heading::East },
                SpawnPoint { cell: (31, 9), heading: Heading::West },
            ],
            views: vec![view16(1, 0, 0), view16(2, 16, 0)],
            vehicles: 4,
            speeds: vec![1],
            seed,
            transit_bound: 2,
        }),
        4 => Ok(WorldConfig {
            grid: (32, 32),
            roads: vec![
                Segment::new((8, 8), (24, 8)),
                Segment::new((8, 24), (24, 24)),
                Segment::new((8, 8), (8, 24)),
                Segment::new((24, 8), (24, 24)),
                Segment::new((16, 8), (16, 24)),
                Segment::new((8, 16), (24, 16)),
            ],
            spawns: vec![SpawnPoint { cell: (8, 8), heading: Heading::East }],
            views: vec![view16(1, 0, 0), view16(2, 16, 0), view16(3, 0, 16), view16(4, 16, 16)],
            vehicles: 8,
            speeds: vec![1],
            seed,
            transit_bound: 2,
        }),
        8 => Ok(WorldConfig {
            grid: (64, 64),
            roads: vec![
                Segment::new((8, 24), (56, 24)),
                Segment::new((8, 40), (56, 40)),
                Segment::new((8, 24), (8, 40)),
                Segment::new((24, 24), (24, 40)),
                Segment::new((40, 24), (40, 40)),
                Segment::new((56, 24), (56, 40)),
            ],
            spawns: vec![SpawnPoint { cell: (8, 24), heading: Heading::East }],
            views: vec![
                view16(1, 0, 16),
                view16(2, 16, 16),
                view16(3, 32, 16),
                view16(4, 48, 16),
                view16(5, 0, 32),
                view16(6, 16, 32),
                view16(7, 32, 32),
                view16(8, 48, 32),
            ],
            vehicles: 12,
            speeds: vec![1],
            seed,
            transit_bound: 2,
        }),
        n => Err(WorldError::BadConfig(format!("no preset for {n} views (use 2, 4, or 8)"))),
    }
}
