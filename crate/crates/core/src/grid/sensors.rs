//! Observation synthesis: egocentric depth raycasts and a parametric binaural
//! audio feature carrying distance and bearing cues.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GridError, NavGraph, Pose, SoundSignature};

/// Audio gain floor; keeps both channels alive at any distance.
const GAIN_FLOOR: f64 = 0.01;

/// Horizontal field of view of the depth sensor.
const FOV: f64 = std::f64::consts::FRAC_PI_2;

/// One egocentric observation. `depth` is H*W row-major in [0,1]; `audio` is
/// 2*F row-major (left channel first), non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub depth: Vec<f64>,
    pub depth_shape: (usize, usize),
    pub audio: Vec<f64>,
    pub audio_bins: usize,
    pub rgb: Option<Vec<f64>>,
}

impl Observation {
    pub fn all_finite(&self) -> bool {
        self.depth.iter().all(|v| v.is_finite()) && self.audio.iter().all(|v| v.is_finite())
    }
}

/// Casts `w` rays uniformly across a 90-degree FOV centered on the pose's
/// heading. Each column holds the normalized distance to the first wall or
/// boundary sample (unit steps along the ray, clamped to [0,1]), replicated
/// down all `h` rows. Column 0 is the leftmost ray.
pub fn render_depth(graph: &NavGraph, pose: &Pose, res: (usize, usize), max_range: usize) -> Vec<f64> {
    let (h, w) = res;
    let (cx, cy) = graph.xy(pose.cell);
    let ox = cx as f64 + 0.5;
    let oy = cy as f64 + 0.5;
    let base = pose.heading.angle();

    let mut columns = vec![1.0; w];
    for (col, slot) in columns.iter_mut().enumerate() {
        let offset = FOV / 2.0 - (col as f64 + 0.5) * FOV / w as f64;
        let theta = base + offset;
        let (dx, dy) = (theta.cos(), -theta.sin());
        for t in 1..=max_range {
            let px = ox + t as f64 * dx;
            let py = oy + t as f64 * dy;
            let gx = px.floor() as i64;
            let gy = py.floor() as i64;
            let blocked = gx < 0
                || gy < 0
                || gx >= graph.width() as i64
                || gy >= graph.height() as i64
                || !graph.is_traversable(graph.cell_at(gx as usize, gy as usize));
            if blocked {
                *slot = (t as f64 / max_range as f64).min(1.0);
                break;
            }
        }
    }

    let mut out = Vec::with_capacity(h * w);
    for _ in 0..h {
        out.extend_from_slice(&columns);
    }
    out
}

/// Synthesizes the 2xF binaural feature for a robot/source pair.
///
/// With geodesic distance `g` and bearing `phi` (positive = source to the
/// robot's left), channel gains are
///
///   gain_L = A(g) * (1 + sin phi) / 2 + 0.01
///   gain_R = A(g) * (1 - sin phi) / 2 + 0.01,   A(g) = 1 / (1 + g)
///
/// and each channel is `gain * spectrum` plus optional Gaussian noise, clamped
/// at zero. Co-located pairs use phi = 0.
pub fn synthesize_binaural(
    graph: &NavGraph,
    robot: &Pose,
    source_cell: super::CellId,
    signature: &SoundSignature,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, GridError> {
    let g = graph
        .bfs_distance(robot.cell, source_cell)
        .ok_or(GridError::Unreachable(robot.cell, source_cell))?;

    let phi = if robot.cell == source_cell {
        0.0
    } else {
        let (rx, ry) = graph.xy(robot.cell);
        let (sx, sy) = graph.xy(source_cell);
        let vx = sx as f64 - rx as f64;
        let vy = sy as f64 - ry as f64;
        // y is flipped into math orientation, consistent with Heading::angle.
        let bearing = (-vy).atan2(vx);
        wrap_angle(bearing - robot.heading.angle())
    };

    let attenuation = 1.0 / (1.0 + g as f64);
    let gain_l = attenuation * (1.0 + phi.sin()) / 2.0 + GAIN_FLOOR;
    let gain_r = attenuation * (1.0 - phi.sin()) / 2.0 + GAIN_FLOOR;

    let bins = signature.spectrum.len();
    let mut audio = Vec::with_capacity(2 * bins);
    for &gain in &[gain_l, gain_r] {
        for &s in &signature.spectrum {
            let mut v = gain * s;
            if noise_std > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                v = (v + noise_std * n).max(0.0);
            }
            audio.push(v);
        }
    }
    Ok(audio)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}
