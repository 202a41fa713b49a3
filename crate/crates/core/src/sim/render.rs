//! Occupancy-grid and attention-map rendering.

use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Agent, SimConfig, X_HALF_WIDTH, Z_FAR, Z_NEAR};

/// Fractional `(row, col)` of a world point on a `grid × grid` raster.
/// Row 0 is the far edge, column 0 the left edge; cell centres sit at integers.
pub fn world_to_grid(x: f64, z: f64, grid: usize) -> (f64, f64) {
    let g = grid as f64;
    let col = (x + X_HALF_WIDTH) / (2.0 * X_HALF_WIDTH) * g - 0.5;
    let row = (Z_FAR - z) / (Z_FAR - Z_NEAR) * g - 0.5;
    (row, col)
}

fn cell_size(grid: usize) -> (f64, f64) {
    let g = grid as f64;
    ((Z_FAR - Z_NEAR) / g, 2.0 * X_HALF_WIDTH / g)
}

/// Adds `amp · exp(−½((r−r0)²/σr² + (c−c0)²/σc²))` to channel `ch` of a
/// `[grid, grid, channels]` frame, within three sigmas.
#[allow(clippy::too_many_arguments)]
fn splat(frame: &mut [f64], grid: usize, channels: usize, ch: usize, r0: f64, c0: f64, sr: f64, sc: f64, amp: f64) {
    let g = grid as isize;
    let rlo = ((r0 - 3.0 * sr).floor() as isize).clamp(0, g);
    let rhi = ((r0 + 3.0 * sr).ceil() as isize + 1).clamp(0, g);
    let clo = ((c0 - 3.0 * sc).floor() as isize).clamp(0, g);
    let chi = ((c0 + 3.0 * sc).ceil() as isize + 1).clamp(0, g);
    for r in rlo..rhi {
        let dr = (r as f64 - r0) / sr;
        for c in clo..chi {
            let dc = (c as f64 - c0) / sc;
            let v = amp * (-0.5 * (dr * dr + dc * dc)).exp();
            frame[(r as usize * grid + c as usize) * channels + ch] += v;
        }
    }
}

/// `[T, grid, grid, 3]`: vulnerable users, vehicles, ego and lane markings.
pub(super) fn scene(rng: &mut Rng, cfg: &SimConfig, agents: &[Agent]) -> Tensor {
    let g = cfg.grid;
    let per_frame = g * g * 3;
    let (cell_z, cell_x) = cell_size(g);
    let mut static_layer = vec![0.0; per_frame];
    let (er, ec) = world_to_grid(0.0, 0.0, g);
    splat(&mut static_layer, g, 3, 2, er, ec, 0.8, 0.8, 1.0);
    for lane_x in [-1.75, 1.75] {
        let (_, c) = world_to_grid(lane_x, 0.0, g);
        let c = c.round().clamp(0.0, g as f64 - 1.0) as usize;
        for r in 0..g {
            static_layer[(r * g + c) * 3 + 2] += 0.5;
        }
    }
    let mut data = Vec::with_capacity(cfg.frames * per_frame);
    for t in 0..cfg.frames {
        let mut frame = static_layer.clone();
        for a in agents {
            if a.hidden[t] {
                continue;
            }
            let s = a.track[t];
            let (r, c) = world_to_grid(s.x, s.z, g);
            let (w, l) = a.class.size();
            let sr = (l / 2.0 / cell_z).max(0.5);
            let sc = (w / 2.0 / cell_x).max(0.5);
            let ch = if a.class.is_vulnerable() { 0 } else { 1 };
            splat(&mut frame, g, 3, ch, r, c, sr, sc, 1.0);
        }
        if cfg.pixel_noise > 0.0 {
            for v in &mut frame {
                *v += cfg.pixel_noise * rng.normal();
            }
        }
        data.extend_from_slice(&frame);
    }
    Tensor::new(vec![cfg.frames, g, g, 3], data).expect("scene shape")
}

const ATTENTIVE_SIGMA: f64 = 1.2;
const SECONDARY_WEIGHT: f64 = 0.15;
const FLOOR: f64 = 1e-4;
/// Where an idle driver looks: the lane ahead.
const ROAD_AHEAD: (f64, f64) = (0.0, 25.0);

/// `[T, grid, grid, 1]` normalised gaze maps. `focus` names the agent index,
/// the frame it starts closing in and its contact/closest frame.
pub(super) fn attention(
    rng: &mut Rng,
    cfg: &SimConfig,
    agents: &[Agent],
    focus: Option<(usize, usize, usize)>,
    distracted: bool,
) -> Tensor {
    let g = cfg.grid;
    let gf = g as f64;
    let offset = {
        let angle = rng.range(0.0, std::f64::consts::TAU);
        let radius = rng.range(6.0, 11.0) * gf / 32.0;
        (radius * angle.sin(), radius * angle.cos())
    };
    let sigma = if distracted { rng.range(3.5, 5.0) * gf / 32.0 } else { ATTENTIVE_SIGMA * gf / 32.0 };
    let secondary = if agents.len() > 1 { Some(rng.below(0, agents.len())) } else { None };
    let mut drift = (0.0, 0.0);
    let mut data = Vec::with_capacity(cfg.frames * g * g);
    for t in 0..cfg.frames {
        let target = match focus {
            Some((i, start, _)) if t > start => (agents[i].track[t].x, agents[i].track[t].z),
            _ => ROAD_AHEAD,
        };
        let (mut r, mut c) = world_to_grid(target.0, target.1, g);
        if distracted {
            drift.0 += 0.3 * rng.normal();
            drift.1 += 0.3 * rng.normal();
            r += offset.0 + drift.0;
            c += offset.1 + drift.1;
        } else {
            r += 0.3 * rng.normal();
            c += 0.3 * rng.normal();
        }
        let r = r.clamp(0.0, gf - 1.0);
        let c = c.clamp(0.0, gf - 1.0);
        let mut frame = vec![FLOOR; g * g];
        splat(&mut frame, g, 1, 0, r, c, sigma, sigma, 1.0 - SECONDARY_WEIGHT);
        let (sr, sc) = match secondary {
            Some(j) => world_to_grid(agents[j].track[t].x, agents[j].track[t].z, g),
            None => world_to_grid(ROAD_AHEAD.0, ROAD_AHEAD.1, g),
        };
        splat(
            &mut frame,
            g,
            1,
            0,
            sr.clamp(0.0, gf - 1.0),
            sc.clamp(0.0, gf - 1.0),
            sigma,
            sigma,
            SECONDARY_WEIGHT,
        );
        let total: f64 = frame.iter().sum();
        data.extend(frame.iter().map(|v| v / total));
    }
    Tensor::new(vec![cfg.frames, g, g, 1], data).expect("attention shape")
}
