//! Synthetic sequence generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape3, Tensor4};

/// Square positions and velocities for every frame, reflecting at walls.
///
/// Positions are the square's top-left corner `(x, y)` and stay within
/// `[0, size - square]` on both axes.
pub fn bounce_track(
    size: usize,
    frames: usize,
    square: usize,
    start: (usize, usize),
    velocity: (i64, i64),
) -> Result<Vec<((usize, usize), (i64, i64))>> {
    if square == 0 || square >= size {
        return Err(Error::InvalidConfig(format!(
            "square side {square} must be in 1..{size}"
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidConfig("need at least one frame".into()));
    }
    let max = (size - square) as i64;
    if start.0 as i64 > max || start.1 as i64 > max {
        return Err(Error::InvalidConfig(format!(
            "start {start:?} puts the square outside the frame"
        )));
    }
    if velocity.0.abs() > max || velocity.1.abs() > max {
        return Err(Error::InvalidConfig(format!(
            "speed {velocity:?} exceeds the free range {max}"
        )));
    }
    let reflect = |p: i64, v: i64| -> (i64, i64) {
        let n = p + v;
        if n < 0 {
            (-n, -v)
        } else if n > max {
            (2 * max - n, -v)
        } else {
            (n, v)
        }
    };
    let (mut x, mut y) = (start.0 as i64, start.1 as i64);
    let (mut vx, mut vy) = velocity;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(((x as usize, y as usize), (vx, vy)));
        (x, vx) = reflect(x, vx);
        (y, vy) = reflect(y, vy);
    }
    Ok(out)
}

/// Single-channel frames with a lit square moving from an explicit start.
pub fn bouncing_from<T: Scalar>(
    size: usize,
    frames: usize,
    square: usize,
    start: (usize, usize),
    velocity: (i64, i64),
) -> Result<Tensor4<T>> {
    let track = bounce_track(size, frames, square, start, velocity)?;
    let shape = Shape3::new(size, size, 1);
    let mut out = Tensor4::zeros(frames, shape);
    let fl = shape.len();
    for (t, &((x, y), _)) in track.iter().enumerate() {
        let frame = &mut out.data_mut()[t * fl..(t + 1) * fl];
        for row in y..y + square {
            for col in x..x + square {
                frame[row * size + col] = T::one();
            }
        }
    }
    Ok(out)
}

/// Bouncing square with a seeded start position and seeded velocity signs.
pub fn gen_bouncing<T: Scalar>(
    size: usize,
    frames: usize,
    square: usize,
    velocity: (i64, i64),
    seed: u64,
) -> Result<Tensor4<T>> {
    if square == 0 || square >= size {
        return Err(Error::InvalidConfig(format!(
            "square side {square} must be in 1..{size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = size - square;
    let start = (rng.gen_range(0..=max), rng.gen_range(0..=max));
    let sx = if rng.gen_bool(0.5) { 1 } else { -1 };
    let sy = if rng.gen_bool(0.5) { 1 } else { -1 };
    bouncing_from(size, frames, square, start, (sx * velocity.0, sy * velocity.1))
}

/// `seqs` bouncing sequences. The square side is `size / 4`; per-axis
/// speeds are drawn from `{1, 2}`.
pub fn bouncing_dataset<T: Scalar>(seqs: usize, frames: usize, size: usize, seed: u64) -> Result<Vec<Tensor4<T>>> {
    if size < 8 {
        return Err(Error::InvalidConfig(format!(
            "bouncing frames need size >= 8, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..seqs)
        .map(|_| {
            let v = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            gen_bouncing(size, frames, size / 4, v, rng.gen())
        })
        .collect()
}

pub const MAX_SPEED: usize = 2;
pub const HORIZONTAL_CODE: f64 = 0.5;
pub const VERTICAL_CODE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// One road: a full row or column carrying a periodic vehicle pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub orientation: Orientation,
    /// Row of a horizontal road, column of a vertical one.
    pub index: usize,
    /// Cells per frame, in `1..=MAX_SPEED`.
    pub speed: usize,
    /// Travel towards increasing coordinates when true.
    pub forward: bool,
    /// Occupancy along the road at `t = 0`; length equals the frame size.
    pub pattern: Vec<f64>,
}

impl Road {
    /// Occupancy at position `k` along the road at frame `t`.
    pub fn occupancy(&self, k: usize, t: usize) -> f64 {
        let n = self.pattern.len();
        let shift = (self.speed * t) % n;
        let src = if self.forward {
            (k + n - shift) % n
        } else {
            (k + shift) % n
        };
        self.pattern[src]
    }
}

/// Renders three-channel frames: occupancy, speed / MAX_SPEED, and a
/// direction code (0.5 horizontal, 1.0 vertical). Speed and direction
/// are set only where a vehicle is present; at crossings the road with
/// the larger occupancy wins, ties going to the earlier road.
pub fn render_traffic<T: Scalar>(size: usize, frames: usize, roads: &[Road]) -> Result<Tensor4<T>> {
    if size < 2 || frames == 0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate traffic size {size} x {frames} frames"
        )));
    }
    for r in roads {
        if r.index >= size || r.pattern.len() != size || r.speed == 0 || r.speed > MAX_SPEED {
            return Err(Error::InvalidConfig(format!("invalid road {r:?}")));
        }
        if r.pattern.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("road occupancy must lie in [0, 1]".into()));
        }
    }
    let shape = Shape3::new(size, size, 3);
    let mut out = Tensor4::zeros(frames, shape);
    let fl = shape.len();
    for t in 0..frames {
        let frame = &mut out.data_mut()[t * fl..(t + 1) * fl];
        let mut best = vec![0.0f64; size * size];
        for r in roads {
            let code = match r.orientation {
                Orientation::Horizontal => HORIZONTAL_CODE,
                Orientation::Vertical => VERTICAL_CODE,
            };
            for k in 0..size {
                let (row, col) = match r.orientation {
                    Orientation::Horizontal => (r.index, k),
                    Orientation::Vertical => (k, r.index),
                };
                let occ = r.occupancy(k, t);
                let site = row * size + col;
                if occ > best[site] {
                    best[site] = occ;
                    frame[site * 3] = T::of(occ);
                    frame[site * 3 + 1] = T::of(r.speed as f64 / MAX_SPEED as f64);
                    frame[site * 3 + 2] = T::of(code);
                }
            }
        }
    }
    Ok(out)
}

/// Seeded road layout: distinct rows for horizontal roads, distinct
/// columns for vertical ones, vehicles on about a quarter of the cells
/// with occupancy in `[0.5, 1]`.
pub fn sample_roads(size: usize, roads: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Road>> {
    if roads == 0 || roads > 2 * size {
        return Err(Error::InvalidConfig(format!(
            "road count {roads} must be in 1..={}",
            2 * size
        )));
    }
    let mut free_rows: Vec<usize> = (0..size).collect();
    let mut free_cols: Vec<usize> = (0..size).collect();
    let mut out = Vec::with_capacity(roads);
    for _ in 0..roads {
        let horizontal = if free_rows.is_empty() {
            false
        } else if free_cols.is_empty() {
            true
        } else {
            rng.gen_bool(0.5)
        };
        let pool = if horizontal { &mut free_rows } else { &mut free_cols };
        let index = pool.swap_remove(rng.gen_range(0..pool.len()));
        let pattern = (0..size)
            .map(|_| {
                if rng.gen_bool(0.25) {
                    rng.gen_range(0.5..=1.0)
                } else {
                    0.0
                }
            })
            .collect();
        out.push(Road {
            orientation: if horizontal {
                Orientation::Horizontal
            } else {
                Orientation::Vertical
            },
            index,
            speed: rng.gen_range(1..=MAX_SPEED),
            forward: rng.gen_bool(0.5),
            pattern,
        });
    }
    Ok(out)
}

pub fn gen_traffic_toy<T: Scalar>(size: usize, frames: usize, roads: usize, seed: u64) -> Result<Tensor4<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = sample_roads(size, roads, &mut rng)?;
    render_traffic(size, frames, &layout)
}

/// `seqs` traffic sequences with `max(2, size / 8)` roads each.
pub fn traffic_dataset<T: Scalar>(seqs: usize, frames: usize, size: usize, seed: u64) -> Result<Vec<Tensor4<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roads = (size / 8).max(2);
    (0..seqs)
        .map(|_| gen_traffic_toy(size, frames, roads, rng.gen()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Bouncing,
    Traffic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Bouncing => "bouncing",
            DatasetKind::Traffic => "traffic",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Bouncing => 1,
            DatasetKind::Traffic => 3,
        }
    }

    pub fn generate<T: Scalar>(self, seqs: usize, frames: usize, size: usize, seed: u64) -> Result<Vec<Tensor4<T>>> {
        match self {
            DatasetKind::Bouncing => bouncing_dataset(seqs, frames, size, seed),
            DatasetKind::Traffic => traffic_dataset(seqs, frames, size, seed),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bouncing" => Ok(DatasetKind::Bouncing),
            "traffic" => Ok(DatasetKind::Traffic),
            other => Err(format!("unknown dataset '{other}' (expected bouncing or traffic)")),
        }
    }
}
