//! Road scenes: centerlines, lane graph, traffic elements and their rasters.

mod generate;
mod raster;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, Point};

pub use generate::{sample_scene, GenConfig};
pub use raster::{ddt_mask, distance_field, positional_encoding, rasterize_bev, BevGrid, DdtMask, DDT_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevSpec {
    pub height_cells: usize,
    pub width_cells: usize,
    pub meters_per_cell: f64,
    pub lane_width: f64,
    pub feature_channels: usize,
}

impl Default for BevSpec {
    fn default() -> Self {
        Self {
            height_cells: 50,
            width_cells: 25,
            meters_per_cell: 0.5,
            lane_width: 3.0,
            feature_channels: 19,
        }
    }
}

impl BevSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height_cells == 0
            || self.width_cells == 0
            || self.feature_channels < 3
            || !(self.meters_per_cell > 0.0)
            || !(self.lane_width > 0.0)
        {
            return Err(Error::Config(format!("invalid BEV spec {self:?}")));
        }
        Ok(())
    }

    /// Extent along x (columns) in meters.
    pub fn width_m(&self) -> f64 {
        self.width_cells as f64 * self.meters_per_cell
    }

    /// Extent along y (rows) in meters.
    pub fn height_m(&self) -> f64 {
        self.height_cells as f64 * self.meters_per_cell
    }

    pub fn cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        [
            (col as f64 + 0.5) * self.meters_per_cell,
            (row as f64 + 0.5) * self.meters_per_cell,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centerline {
    pub id: usize,
    pub points: Vec<Point>,
}

impl Centerline {
    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn end(&self) -> Point {
        *self.points.last().expect("centerline has points")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "signal-red")]
    SignalRed,
    #[serde(rename = "signal-green")]
    SignalGreen,
    #[serde(rename = "sign")]
    Sign,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::SignalRed, Category::SignalGreen, Category::Sign];

    pub fn index(self) -> usize {
        match self {
            Category::SignalRed => 0,
            Category::SignalGreen => 1,
            Category::Sign => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficElement {
    pub id: usize,
    /// `[x0, y0, x1, y1]` in the normalized front plane.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub centerlines: Vec<Centerline>,
    pub adjacency: Vec<Vec<u8>>,
    pub traffic: Vec<TrafficElement>,
    pub l2t: Vec<Vec<u8>>,
    pub spec: BevSpec,
}

impl SceneGraph {
    pub fn num_lines(&self) -> usize {
        self.centerlines.len()
    }

    pub fn num_traffic(&self) -> usize {
        self.traffic.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().flatten().filter(|&&v| v == 1).count()
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self, connection_tolerance: f64) -> Result<()> {
        self.spec.validate()?;
        let g = self.centerlines.len();
        let m = self.traffic.len();
        let (w, h) = (self.spec.width_m(), self.spec.height_m());
        for c in &self.centerlines {
            if c.points.len() < 2 {
                return Err(Error::Input(format!("centerline {} has < 2 points", c.id)));
            }
            for p in &c.points {
                if !(p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h) {
                    return Err(Error::Input(format!("centerline {} leaves the BEV", c.id)));
                }
            }
            if c.points.windows(2).any(|s| s[0] == s[1]) {
                return Err(Error::Input(format!("centerline {} repeats a point", c.id)));
            }
        }
        if self.adjacency.len() != g || self.adjacency.iter().any(|r| r.len() != g) {
            return Err(Error::Input("adjacency must be G×G".into()));
        }
        for i in 0..g {
            for j in 0..g {
                let a = self.adjacency[i][j];
                if a > 1 || (i == j && a != 0) {
                    return Err(Error::Input(format!("bad adjacency entry ({i},{j})")));
                }
                if a == 1
                    && dist(self.centerlines[i].end(), self.centerlines[j].start())
                        > connection_tolerance
                {
                    return Err(Error::Input(format!("edge ({i},{j}) is not geometric")));
                }
            }
        }
        if self.l2t.len() != g || self.l2t.iter().any(|r| r.len() != m || r.iter().any(|&v| v > 1)) {
            return Err(Error::Input("l2t must be binary G×M".into()));
        }
        for t in &self.traffic {
            let [x0, y0, x1, y1] = t.bbox;
            if !(x1 > x0 && y1 > y0) {
                return Err(Error::Input(format!("traffic element {} has an empty box", t.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
