use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Visual pattern drawn by a department.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Stripes,
    TiltedStripes,
    Rings,
    Checker,
    Blobs,
    Dots,
    Crosses,
    Frames,
}

/// What a department's questions ask about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Presence,
    Count,
    Orientation,
}

impl Family {
    /// Assignment order: client `t` gets `ALL[t % 8]`, so the first two clients
    /// always form the related stripes pair.
    pub const ALL: [Family; 8] = [
        Family::Stripes,
        Family::TiltedStripes,
        Family::Rings,
        Family::Checker,
        Family::Blobs,
        Family::Dots,
        Family::Crosses,
        Family::Frames,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).expect("listed family")
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::TiltedStripes => "tilted_stripes",
            Family::Rings => "rings",
            Family::Checker => "checker",
            Family::Blobs => "blobs",
            Family::Dots => "dots",
            Family::Crosses => "crosses",
            Family::Frames => "frames",
        }
    }

    pub fn attributes(self) -> &'static [Attribute] {
        match self {
            Family::Stripes | Family::TiltedStripes => &[Attribute::Presence, Attribute::Count, Attribute::Orientation],
            _ => &[Attribute::Presence, Attribute::Count],
        }
    }

    /// Largest object count that fits an image.
    pub fn max_count(self) -> usize {
        match self {
            Family::Dots | Family::Checker => 6,
            _ => 4,
        }
    }

    /// Declared overlap between two families.
    pub fn relatedness(self, other: Family) -> f64 {
        use Family::*;
        if self == other {
            return 1.0;
        }
        let pair = if self < other { (self, other) } else { (other, self) };
        match pair {
            (Stripes, TiltedStripes) | (Rings, Frames) | (Blobs, Dots) => 0.5,
            _ => 0.0,
        }
    }

    /// Adds `count` objects of this family onto `canvas` (`side x side`).
    pub fn draw<R: Rng>(self, canvas: &mut [f64], side: usize, count: usize, rng: &mut R) {
        let ink = |canvas: &mut [f64], x: usize, y: usize, v: f64| {
            if x < side && y < side {
                let c = &mut canvas[y * side + x];
                *c = c.max(v);
            }
        };
        let half = side / 2;
        let quadrants = |rng: &mut R| sample(rng, 4, count).into_vec();
        match self {
            Family::Stripes | Family::TiltedStripes => {
                // rows 0, 2, 4, ... keep stripes at least one pixel apart
                let slots = (side - 1).div_ceil(2);
                let mut rows: Vec<usize> = sample(rng, slots, count).into_iter().map(|s| 2 * s).collect();
                rows.sort_unstable();
                let tilt = self == Family::TiltedStripes;
                for row in rows {
                    let v = rng.random_range(0.7..1.0);
                    for x in 0..side {
                        let y = if tilt && x >= half { row + 1 } else { row };
                        ink(canvas, x, y, v);
                    }
                }
            }
            Family::Rings => {
                for q in quadrants(rng) {
                    let (ox, oy) = ((q % 2) * half, (q / 2) * half);
                    let (dx, dy) = (rng.random_range(0..=half - 3), rng.random_range(0..=half - 3));
                    let v = rng.random_range(0.7..1.0);
                    for i in 0..3 {
                        for j in 0..3 {
                            if (i, j) != (1, 1) {
                                ink(canvas, ox + dx + i, oy + dy + j, v);
                            }
                        }
                    }
                }
            }
            Family::Checker => {
                let coarse = half;
                let cells: Vec<(usize, usize)> = (0..coarse * coarse)
                    .map(|c| (c % coarse, c / coarse))
                    .filter(|(x, y)| (x + y) % 2 == 0)
                    .collect();
                for c in sample(rng, cells.len(), count) {
                    let (cx, cy) = cells[c];
                    let v = rng.random_range(0.7..1.0);
                    for i in 0..2 {
                        for j in 0..2 {
                            ink(canvas, 2 * cx + i, 2 * cy + j, v);
                        }
                    }
                }
            }
            Family::Blobs => {
                for q in quadrants(rng) {
                    let cx = (q % 2 * half) as f64 + half as f64 / 2.0 - 0.5 + rng.random_range(-0.5..0.5);
                    let cy = (q / 2 * half) as f64 + half as f64 / 2.0 - 0.5 + rng.random_range(-0.5..0.5);
                    let v = rng.random_range(0.7..1.0);
                    for y in 0..side {
                        for x in 0..side {
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            let w = v * (-d2 / 1.5).exp();
                            if w > 0.05 {
                                ink(canvas, x, y, w);
                            }
                        }
                    }
                }
            }
            Family::Dots => {
                let mut taken: Vec<(usize, usize)> = Vec::with_capacity(count);
                while taken.len() < count {
                    let (x, y) = (rng.random_range(0..side), rng.random_range(0..side));
                    if taken.iter().all(|&(a, b)| a.abs_diff(x) > 1 || b.abs_diff(y) > 1) {
                        taken.push((x, y));
                        let v = rng.random_range(0.7..1.0);
                        ink(canvas, x, y, v);
                    }
                }
            }
            Family::Crosses => {
                for q in quadrants(rng) {
                    let (ox, oy) = ((q % 2) * half, (q / 2) * half);
                    let (cx, cy) = (ox + 1 + rng.random_range(0..=half - 3), oy + 1 + rng.random_range(0..=half - 3));
                    let v = rng.random_range(0.7..1.0);
                    for (x, y) in [(cx, cy), (cx - 1, cy), (cx + 1, cy), (cx, cy - 1), (cx, cy + 1)] {
                        ink(canvas, x, y, v);
                    }
                }
            }
            Family::Frames => {
                // one lit border edge per object: top, right, bottom, left
                for edge in sample(rng, 4, count) {
                    let v = rng.random_range(0.7..1.0);
                    for i in 0..side {
                        let (x, y) = match edge {
                            0 => (i, 0),
                            1 => (side - 1, i),
                            2 => (i, side - 1),
                            _ => (0, i),
                        };
                        ink(canvas, x, y, v);
                    }
                }
            }
        }
    }
}
