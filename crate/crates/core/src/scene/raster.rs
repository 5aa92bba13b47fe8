use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BevSpec, Centerline, SceneGraph};
use crate::error::{Error, Result};
use crate::geometry::{densify, dist, point_segment_distance, Point};
use crate::nn::Tensor;

pub const DDT_CLASSES: usize = 6;

/// BEV feature raster, cell-major (`row * width + col`), `channels` values per cell.
///
/// Channel 0 is lane occupancy, channel 1 marks centerline endpoints, channel 2 is a
/// ridge `max(0, 1 - d / (L/2))` peaking on the nearest centerline, the rest are fixed
/// sinusoidal encodings of the cell position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub features: Vec<f64>,
}

impl BevGrid {
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.features[(row * self.width + col) * self.channels + ch]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.height * self.width, self.channels, self.features.clone())
            .expect("grid dimensions")
    }
}

/// Fills `out` with sin/cos pairs of `x` and `y` (both normalized to [0, 1]) at
/// octave frequencies, in the order sin x, cos x, sin y, cos y per octave.
pub fn positional_encoding(x: f64, y: f64, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let octave = (k / 4) as i32;
        let w = std::f64::consts::PI * 2f64.powi(octave);
        let v = if (k / 2) % 2 == 0 { x } else { y };
        *o = if k % 2 == 0 { (w * v).sin() } else { (w * v).cos() };
    }
}

pub fn rasterize_bev(scene: &SceneGraph, spec: &BevSpec, noise_sigma: f64, seed: u64) -> Result<BevGrid> {
    spec.validate()?;
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {noise_sigma}")));
    }
    let (h, w, c) = (spec.height_cells, spec.width_cells, spec.feature_channels);
    let half = spec.lane_width / 2.0;
    let mut features = vec![0.0; h * w * c];
    let ends: Vec<Point> = scene
        .centerlines
        .iter()
        .flat_map(|l| [l.start(), l.end()])
        .collect();
    for row in 0..h {
        for col in 0..w {
            let p = spec.cell_center(row, col);
            let cell = &mut features[(row * w + col) * c..(row * w + col + 1) * c];
            let d = scene
                .centerlines
                .iter()
                .flat_map(|l| l.points.windows(2).map(|s| point_segment_distance(p, s[0], s[1])))
                .fold(f64::INFINITY, f64::min);
            cell[0] = f64::from(u8::from(d <= half));
            cell[1] = f64::from(u8::from(ends.iter().any(|&e| dist(p, e) <= half)));
            cell[2] = (1.0 - d / half).max(0.0);
            positional_encoding(p[0] / spec.width_m(), p[1] / spec.height_m(), &mut cell[3..]);
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for cell in features.chunks_mut(c) {
            for v in &mut cell[..3] {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(BevGrid {
        height: h,
        width: w,
        channels: c,
        features,
    })
}

/// Per-cell discrete distance class, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdtMask {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl DdtMask {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }
}

/// Clipped, normalized distance `min(d, L/2) / (L/2)` from every cell center to the
/// centerline densified to cell spacing, row-major.
pub fn distance_field(line: &Centerline, spec: &BevSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if line.points.is_empty() || line.points.iter().all(|&p| p == line.points[0]) {
        return Err(Error::Input(format!("centerline {} is degenerate", line.id)));
    }
    let (h, w) = (spec.height_cells, spec.width_cells);
    let mpc = spec.meters_per_cell;
    let half = spec.lane_width / 2.0;
    let pts = densify(&line.points, mpc);
    let mut d = vec![f64::INFINITY; h * w];
    // cells farther than half a lane from every point clip to 1 anyway
    for p in &pts {
        let c0 = ((p[0] - half) / mpc - 0.5).floor().max(0.0) as usize;
        let c1 = (((p[0] + half) / mpc - 0.5).ceil().max(0.0) as usize).min(w - 1);
        let r0 = ((p[1] - half) / mpc - 0.5).floor().max(0.0) as usize;
        let r1 = (((p[1] + half) / mpc - 0.5).ceil().max(0.0) as usize).min(h - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let dd = dist(spec.cell_center(row, col), *p);
                let slot = &mut d[row * w + col];
                if dd < *slot {
                    *slot = dd;
                }
            }
        }
    }
    Ok(d.into_iter().map(|dd| dd.min(half) / half).collect())
}

/// Six-way binning of [`distance_field`], class 0 nearest.
pub fn ddt_mask(line: &Centerline, spec: &BevSpec) -> Result<DdtMask> {
    let classes = distance_field(line, spec)?
        .into_iter()
        .map(|u| ((6.0 * u).floor() as u8).min(5))
        .collect();
    Ok(DdtMask {
        height: spec.height_cells,
        width: spec.width_cells,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lane_width: f64) -> BevSpec {
        BevSpec {
            height_cells: 8,
            width_cells: 8,
            meters_per_cell: 1.0,
            lane_width,
            feature_channels: 6,
        }
    }

    #[test]
    fn ddt_hand_cases() {
        // vertical line at x = 2.6 so the cell center x = 3.5 sits 0.9 m away, x = 1.5 at 1.1 m
        let line = Centerline {
            id: 0,
            points: vec![[2.6, 0.5], [2.6, 7.5]],
        };
        let m = ddt_mask(&line, &spec(4.0)).unwrap();
        // d = 1.1, u = 0.55, class 3
        assert_eq!(m.at(3, 1), 3);
        // d = 0.9, u = 0.45, class 2
        assert_eq!(m.at(3, 3), 2);
        // far cells clip to 5
        assert_eq!(m.at(3, 7), 5);

        let on = Centerline {
            id: 1,
            points: vec![[0.5, 0.5], [0.5, 7.5]],
        };
        assert_eq!(ddt_mask(&on, &spec(4.0)).unwrap().at(4, 0), 0);
    }

    #[test]
    fn degenerate_line_is_input_error() {
        let line = Centerline {
            id: 0,
            points: vec![[1.0, 1.0], [1.0, 1.0]],
        };
        assert!(matches!(ddt_mask(&line, &spec(3.0)), Err(Error::Input(_))));
    }
}
