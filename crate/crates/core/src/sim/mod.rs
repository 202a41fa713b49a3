//! Synthetic driving scenarios.
//!
//! The ego vehicle sits at the origin facing `+z` (metres, `x` to the right).
//! Agents move with constant acceleration, integrated once per frame
//! (semi-implicit Euler). A sequence is positive when some agent comes within
//! the collision radius of the ego centre; `t_accident` is the first such frame.
//!
//! Each sequence carries three modalities:
//!
//! * a `[T,H,W,3]` bird's-eye occupancy grid (vulnerable road users, vehicles,
//!   ego and lane markings) with pixel noise; hazards may be hidden for part of
//!   their approach;
//! * a 32-token description from the fixed vocabulary in [`text`];
//! * a `[T,H,W,1]` driver attention map, a normalised Gaussian mixture that
//!   either follows the relevant agent or drifts and widens when the driver is
//!   distracted.
//!
//! Hazards idle for a while before they start closing in, and parked cars sit
//! in the lane, so a single frame rarely settles the label.

mod io;
mod render;
pub mod text;

pub use io::{load, load_from, save, save_to, FORMAT_VERSION, MAGIC};
pub use render::world_to_grid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceInput;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const X_HALF_WIDTH: f64 = 20.0;
pub const Z_NEAR: f64 = -4.0;
pub const Z_FAR: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentClass {
    Pedestrian,
    Car,
    Motorcycle,
    Bus,
    Cyclist,
}

impl AgentClass {
    pub const ALL: [AgentClass; 5] = [
        AgentClass::Pedestrian,
        AgentClass::Car,
        AgentClass::Motorcycle,
        AgentClass::Bus,
        AgentClass::Cyclist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Car => "car",
            AgentClass::Motorcycle => "motorcycle",
            AgentClass::Bus => "bus",
            AgentClass::Cyclist => "cyclist",
        }
    }

    /// Drawn in the first grid channel rather than the vehicle channel.
    pub fn is_vulnerable(self) -> bool {
        matches!(self, AgentClass::Pedestrian | AgentClass::Motorcycle | AgentClass::Cyclist)
    }

    /// Footprint `(width, length)` in metres.
    pub fn size(self) -> (f64, f64) {
        match self {
            AgentClass::Pedestrian => (0.6, 0.6),
            AgentClass::Car => (1.8, 4.5),
            AgentClass::Motorcycle => (0.8, 2.2),
            AgentClass::Bus => (2.5, 11.0),
            AgentClass::Cyclist => (0.7, 1.8),
        }
    }

    fn speed_range(self) -> (f64, f64) {
        match self {
            AgentClass::Pedestrian => (1.5, 2.5),
            AgentClass::Car => (4.0, 8.0),
            AgentClass::Motorcycle => (5.0, 9.0),
            AgentClass::Bus => (3.0, 6.0),
            AgentClass::Cyclist => (3.0, 5.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentRole {
    /// Closes in and collides with the ego vehicle.
    Hazard,
    /// Closes in but passes with a lateral gap.
    NearMiss,
    Parked,
    /// Crosses far ahead.
    Background,
}

impl AgentRole {
    pub fn code(self) -> u8 {
        match self {
            AgentRole::Hazard => 0,
            AgentRole::NearMiss => 1,
            AgentRole::Parked => 2,
            AgentRole::Background => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => AgentRole::Hazard,
            1 => AgentRole::NearMiss,
            2 => AgentRole::Parked,
            3 => AgentRole::Background,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub z: f64,
    pub vx: f64,
    pub vz: f64,
}

impl AgentState {
    pub fn distance(&self) -> f64 {
        self.x.hypot(self.z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: u16,
    pub class: AgentClass,
    pub role: AgentRole,
    /// Per-frame state, one entry per frame.
    pub track: Vec<AgentState>,
    /// Frames on which the agent is hidden from the occupancy grid.
    pub hidden: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Reference,
    /// Stress set: sparse scene, no conflict.
    Benign,
    /// Stress set: crowded scene with a collision.
    Hazard,
}

impl Regime {
    pub fn code(self) -> u8 {
        match self {
            Regime::Reference => 0,
            Regime::Benign => 1,
            Regime::Hazard => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Regime::Reference,
            1 => Regime::Benign,
            2 => Regime::Hazard,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceFlags {
    pub distracted: bool,
    pub occluded: bool,
    pub hazard_text: bool,
    pub regime: Regime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub fps: f64,
    pub label: bool,
    pub t_accident: Option<usize>,
    pub tokens: Vec<u16>,
    /// `[T,H,W,3]`
    pub scene: Tensor,
    /// `[T,H,W,1]`, each frame nonnegative and summing to one.
    pub attention: Tensor,
    pub agents: Vec<Agent>,
    pub flags: SequenceFlags,
}

impl Sequence {
    pub fn frames(&self) -> usize {
        self.scene.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.scene.shape()[1]
    }

    pub fn input(&self) -> SequenceInput<'_> {
        SequenceInput {
            scene: &self.scene,
            attention: &self.attention,
            tokens: &self.tokens,
        }
    }

    pub fn attention_frame(&self, t: usize) -> &[f64] {
        let n = self.grid() * self.grid();
        &self.attention.data()[t * n..(t + 1) * n]
    }

    pub fn labels(&self, window_s: f64) -> Vec<f64> {
        label_frames(self.frames(), self.t_accident, self.fps, window_s)
    }

    /// Checks the stored fields against each other.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        let g = self.grid();
        if self.scene.shape() != [t, g, g, 3] || self.attention.shape() != [t, g, g, 1] {
            return Err(Error::Input("scene and attention shapes disagree".into()));
        }
        if self.tokens.len() != text::MAX_TOKENS {
            return Err(Error::Input(format!("expected {} tokens", text::MAX_TOKENS)));
        }
        if self.label != self.t_accident.is_some_and(|a| a > 0 && a < t) {
            return Err(Error::Input("label and accident frame disagree".into()));
        }
        for f in 0..t {
            let a = self.attention_frame(f);
            if a.iter().any(|&v| !(v >= 0.0)) || a.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Input(format!("attention map {f} is invalid")));
            }
        }
        if self.agents.iter().any(|a| a.track.len() != t || a.hidden.len() != t) {
            return Err(Error::Input("agent track length differs from frame count".into()));
        }
        Ok(())
    }
}

/// `y_t = 1` iff the sequence is positive and `t ∈ [t_acc − window·fps, t_acc]`.
pub fn label_frames(frames: usize, t_accident: Option<usize>, fps: f64, window_s: f64) -> Vec<f64> {
    let mut y = vec![0.0; frames];
    if let Some(ta) = t_accident {
        let lead = (window_s * fps).round().max(0.0) as usize;
        let start = ta.saturating_sub(lead);
        for v in y.iter_mut().take(ta.min(frames.saturating_sub(1)) + 1).skip(start) {
            *v = 1.0;
        }
    }
    y
}

/// Straight-line motion from `start` with constant acceleration, beginning
/// after frame `start_frame`. Frame 0 holds the initial state.
pub fn simulate_track(
    start: (f64, f64),
    velocity: (f64, f64),
    accel: (f64, f64),
    start_frame: usize,
    frames: usize,
    fps: f64,
) -> Vec<AgentState> {
    let dt = 1.0 / fps;
    let mut s = AgentState {
        x: start.0,
        z: start.1,
        vx: 0.0,
        vz: 0.0,
    };
    let mut track = Vec::with_capacity(frames);
    for k in 0..frames {
        if k > start_frame {
            if k == start_frame + 1 {
                s.vx = velocity.0;
                s.vz = velocity.1;
            } else {
                s.vx += accel.0 * dt;
                s.vz += accel.1 * dt;
            }
            s.x += s.vx * dt;
            s.z += s.vz * dt;
        }
        track.push(s);
    }
    track
}

/// First frame at which the agent centre is within `radius` of the ego centre.
pub fn first_contact(track: &[AgentState], radius: f64) -> Option<usize> {
    track.iter().position(|s| s.distance() <= radius)
}

/// Generator settings. The probabilities control how much each modality
/// reveals about the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub frames: usize,
    pub fps: f64,
    pub grid: usize,
    pub collision_radius: f64,
    pub p_distracted_positive: f64,
    pub p_distracted_negative: f64,
    pub p_hazard_text_positive: f64,
    pub p_hazard_text_negative: f64,
    /// Fraction of negatives with a near-miss agent.
    pub p_near_miss: f64,
    /// Probability that the closing agent is hidden for most of its approach.
    pub p_occluded: f64,
    pub max_parked: usize,
    pub max_background: usize,
    pub pixel_noise: f64,
    /// Lateral miss distance range for near misses, metres.
    pub near_miss_gap: (f64, f64),
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            fps: 10.0,
            grid: 32,
            collision_radius: 1.0,
            p_distracted_positive: 0.65,
            p_distracted_negative: 0.3,
            p_hazard_text_positive: 0.75,
            p_hazard_text_negative: 0.1,
            p_near_miss: 0.6,
            p_occluded: 0.2,
            max_parked: 3,
            max_background: 2,
            pixel_noise: 0.03,
            near_miss_gap: (3.0, 6.0),
        }
    }
}

/// Earliest accident frame the generator aims for.
const MIN_ACCIDENT_FRAME: usize = 30;
/// Minimum closing duration before contact, frames.
const MIN_CLOSING_FRAMES: usize = 22;
const MAX_CLOSING_FRAMES: usize = 40;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let probs = [
            self.p_distracted_positive,
            self.p_distracted_negative,
            self.p_hazard_text_positive,
            self.p_hazard_text_negative,
            self.p_near_miss,
            self.p_occluded,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.frames < MAX_CLOSING_FRAMES + 4 || self.frames > u16::MAX as usize {
            return bad("frames must be at least 44");
        }
        if !(self.fps > 0.0) || !(self.collision_radius > 0.0) || !(self.pixel_noise >= 0.0) {
            return bad("fps and collision radius must be positive, noise nonnegative");
        }
        if self.grid < 4 || self.grid > u16::MAX as usize {
            return bad("grid must be at least 4");
        }
        let (lo, hi) = self.near_miss_gap;
        if !(lo > self.collision_radius) || !(hi >= lo) {
            return bad("near-miss gap must exceed the collision radius");
        }
        Ok(())
    }
}

struct Plan {
    positive: bool,
    regime: Regime,
}

/// Generates `count` sequences with exactly `round(count · positive_fraction)`
/// positives at seeded positions. Sequence `i` depends only on `(seed, i)`.
pub fn generate(seed: u64, count: usize, positive_fraction: f64, cfg: &SimConfig) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::Config("positive fraction must lie in [0, 1]".into()));
    }
    let n_pos = (count as f64 * positive_fraction).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut positive = vec![false; count];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }
    (0..count)
        .map(|i| {
            let plan = Plan {
                positive: positive[i],
                regime: Regime::Reference,
            };
            build(&mut Rng::derive(seed, i as u64), &plan, cfg)
        })
        .collect()
}

pub const REFERENCE_TRAIN: usize = 300;
pub const REFERENCE_TEST: usize = 100;
pub const REFERENCE_POSITIVE_FRACTION: f64 = 0.4;

/// The reference benchmark: disjoint train and test sets drawn from
/// independent seeds derived from `seed`.
pub fn reference_benchmark(seed: u64, cfg: &SimConfig) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    let train = generate(crate::rng::split_seed(seed, 0), REFERENCE_TRAIN, REFERENCE_POSITIVE_FRACTION, cfg)?;
    let test = generate(crate::rng::split_seed(seed, 1), REFERENCE_TEST, REFERENCE_POSITIVE_FRACTION, cfg)?;
    Ok((train, test))
}

/// Two-regime stress set: alternating sparse benign scenes and crowded scenes
/// with a collision.
pub fn generate_stress(seed: u64, count: usize, cfg: &SimConfig) -> Result<Vec<Sequence>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let hazard = i % 2 == 1;
            let plan = Plan {
                positive: hazard,
                regime: if hazard { Regime::Hazard } else { Regime::Benign },
            };
            build(&mut Rng::derive(seed, i as u64), &plan, cfg)
        })
        .collect()
}

fn pick_class(rng: &mut Rng) -> AgentClass {
    AgentClass::ALL[rng.below(0, AgentClass::ALL.len())]
}

fn in_bounds(x: f64, z: f64) -> bool {
    x.abs() <= X_HALF_WIDTH && (0.0..=Z_FAR).contains(&z)
}

/// A closing agent aimed `gap` metres to the side of the ego centre.
/// Returns the track and the frame it starts moving.
fn closing_track(rng: &mut Rng, cfg: &SimConfig, class: AgentClass, gap: f64) -> (Vec<AgentState>, usize) {
    let (vlo, vhi) = class.speed_range();
    loop {
        let speed = rng.range(vlo, vhi);
        let closing = rng.below(MIN_CLOSING_FRAMES, MAX_CLOSING_FRAMES + 1);
        let target = rng.below(MIN_ACCIDENT_FRAME.max(closing), cfg.frames - 3);
        let start_frame = target - closing;
        let phi = rng.range(-50f64, 50.0).to_radians();
        let (s, c) = phi.sin_cos();
        let accel = rng.range(-0.3, 0.3);
        let travel = speed * closing as f64 / cfg.fps + cfg.collision_radius;
        // Aim point is offset along the normal of the approach direction.
        let aim = (c * gap, -s * gap);
        let start = (aim.0 + s * travel, aim.1 + c * travel);
        if !in_bounds(start.0, start.1) || start.0.hypot(start.1) < 3.0 {
            continue;
        }
        let track = simulate_track(start, (-s * speed, -c * speed), (-s * accel, -c * accel), start_frame, cfg.frames, cfg.fps);
        return (track, start_frame);
    }
}

fn hazard_agent(rng: &mut Rng, cfg: &SimConfig, id: u16) -> Result<(Agent, usize, usize)> {
    for _ in 0..1000 {
        let class = pick_class(rng);
        let gap = rng.range(-0.4, 0.4);
        let (mut track, start) = closing_track(rng, cfg, class, gap);
        let Some(t_acc) = first_contact(&track, cfg.collision_radius) else {
            continue;
        };
        if t_acc < MIN_ACCIDENT_FRAME || t_acc + 2 > cfg.frames || t_acc < start + 21 {
            continue;
        }
        let stop = track[t_acc];
        for s in &mut track[t_acc + 1..] {
            *s = AgentState {
                vx: 0.0,
                vz: 0.0,
                ..stop
            };
        }
        let agent = Agent {
            id,
            class,
            role: AgentRole::Hazard,
            hidden: vec![false; cfg.frames],
            track,
        };
        return Ok((agent, start, t_acc));
    }
    Err(Error::Config("could not place a colliding agent; check frames and fps".into()))
}

fn near_miss_agent(rng: &mut Rng, cfg: &SimConfig, id: u16) -> Result<(Agent, usize, usize)> {
    for _ in 0..1000 {
        let class = pick_class(rng);
        let (lo, hi) = cfg.near_miss_gap;
        let side = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let gap = side * rng.range(lo, hi);
        let (track, start) = closing_track(rng, cfg, class, gap);
        if track.iter().any(|s| s.distance() <= cfg.collision_radius) {
            continue;
        }
        let closest = track
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.distance().total_cmp(&b.1.distance()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let agent = Agent {
            id,
            class,
            role: AgentRole::NearMiss,
            hidden: vec![false; cfg.frames],
            track,
        };
        return Ok((agent, start, closest));
    }
    Err(Error::Config("could not place a near-miss agent".into()))
}

fn parked_agent(rng: &mut Rng, cfg: &SimConfig, id: u16) -> Agent {
    let class = if rng.bernoulli(0.25) { AgentClass::Pedestrian } else if rng.bernoulli(0.2) { AgentClass::Bus } else { AgentClass::Car };
    let (x, z) = loop {
        let x = rng.range(-8.0, 8.0);
        let z = rng.range(4.0, 40.0);
        if x.hypot(z) >= 3.0 {
            break (x, z);
        }
    };
    Agent {
        id,
        class,
        role: AgentRole::Parked,
        track: simulate_track((x, z), (0.0, 0.0), (0.0, 0.0), cfg.frames, cfg.frames, cfg.fps),
        hidden: vec![false; cfg.frames],
    }
}

fn background_agent(rng: &mut Rng, cfg: &SimConfig, id: u16) -> Agent {
    let class = pick_class(rng);
    let x = rng.range(-18.0, 18.0);
    let z = rng.range(28.0, 58.0);
    let speed = rng.range(2.0, 7.0) * if x > 0.0 { -1.0 } else { 1.0 };
    Agent {
        id,
        class,
        role: AgentRole::Background,
        track: simulate_track((x, z), (speed, 0.0), (0.0, 0.0), 0, cfg.frames, cfg.fps),
        hidden: vec![false; cfg.frames],
    }
}

fn build(rng: &mut Rng, plan: &Plan, cfg: &SimConfig) -> Result<Sequence> {
    let mut agents = Vec::new();
    let mut t_accident = None;
    // (agent index, frame it starts closing, frame of contact / closest approach)
    let mut focus: Option<(usize, usize, usize)> = None;

    let (n_parked, n_background, near_miss) = match plan.regime {
        Regime::Reference => (
            rng.below(0, cfg.max_parked + 1),
            rng.below(0, cfg.max_background + 1),
            !plan.positive && rng.bernoulli(cfg.p_near_miss),
        ),
        Regime::Benign => (0, 0, false),
        Regime::Hazard => (cfg.max_parked, cfg.max_background, false),
    };

    if plan.positive {
        let (a, start, t) = hazard_agent(rng, cfg, 0)?;
        agents.push(a);
        t_accident = Some(t);
        focus = Some((0, start, t));
    } else if near_miss {
        let (a, start, t) = near_miss_agent(rng, cfg, 0)?;
        agents.push(a);
        focus = Some((0, start, t));
    }
    for _ in 0..n_parked {
        let id = agents.len() as u16;
        agents.push(parked_agent(rng, cfg, id));
    }
    for _ in 0..n_background {
        let id = agents.len() as u16;
        agents.push(background_agent(rng, cfg, id));
    }

    let occluded = plan.regime == Regime::Reference && focus.is_some() && rng.bernoulli(cfg.p_occluded);
    if occluded {
        if let Some((i, _, end)) = focus {
            let visible = rng.below(6, 13);
            let until = end.saturating_sub(visible);
            for h in &mut agents[i].hidden[..until] {
                *h = true;
            }
        }
    }

    let distracted = match plan.regime {
        Regime::Reference if plan.positive => rng.bernoulli(cfg.p_distracted_positive),
        Regime::Reference => rng.bernoulli(cfg.p_distracted_negative),
        _ => false,
    };
    let hazard_text = match plan.regime {
        Regime::Reference if plan.positive => rng.bernoulli(cfg.p_hazard_text_positive),
        Regime::Reference => rng.bernoulli(cfg.p_hazard_text_negative),
        Regime::Hazard => true,
        Regime::Benign => false,
    };

    let classes: Vec<AgentClass> = agents.iter().map(|a| a.class).collect();
    let tokens = text::describe(rng, &classes, hazard_text);
    let scene = render::scene(rng, cfg, &agents);
    let attention = render::attention(rng, cfg, &agents, focus, distracted);

    let seq = Sequence {
        fps: cfg.fps,
        label: t_accident.is_some(),
        t_accident,
        tokens,
        scene,
        attention,
        agents,
        flags: SequenceFlags {
            distracted,
            occluded,
            hazard_text,
            regime: plan.regime,
        },
    };
    debug_assert!(seq.validate().is_ok());
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::head::attention_entropy;

    #[test]
    fn kinematics_oracle() {
        // 10 m out, closing at 5 m/s, radius 1.0, 10 fps.
        let track = simulate_track((0.0, 10.0), (0.0, -5.0), (0.0, 0.0), 0, 40, 10.0);
        let expect = (((10.0f64 - 1.0) / 5.0) * 10.0).ceil() as usize;
        assert_eq!(expect, 18);
        assert_eq!(first_contact(&track, 1.0), Some(18));
        // Hand recurrence: z_k = 10 − 0.5 k.
        assert!((track[17].z - 1.5).abs() < 1e-12);
    }

    #[test]
    fn window_labels() {
        let y = label_frames(64, Some(50), 10.0, 3.0);
        for (t, v) in y.iter().enumerate() {
            assert_eq!(*v, if (20..=50).contains(&t) { 1.0 } else { 0.0 });
        }
        assert!(label_frames(64, None, 10.0, 3.0).iter().all(|&v| v == 0.0));
        let y = label_frames(64, Some(12), 10.0, 3.0);
        assert!(y[..=12].iter().all(|&v| v == 1.0) && y[13..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_generation() {
        let cfg = SimConfig::default();
        let a = generate(7, 10, 0.4, &cfg).unwrap();
        let b = generate(7, 10, 0.4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.label).count(), 4);
        let c = generate(8, 10, 0.4, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_positives_when_fraction_zero() {
        let seqs = generate(3, 12, 0.0, &SimConfig::default()).unwrap();
        assert!(seqs.iter().all(|s| s.t_accident.is_none() && !s.label));
    }

    #[test]
    fn collision_predicate_holds() {
        let cfg = SimConfig::default();
        for s in generate(11, 40, 0.5, &cfg).unwrap() {
            s.validate().unwrap();
            let contact = s
                .agents
                .iter()
                .filter_map(|a| first_contact(&a.track, cfg.collision_radius))
                .min();
            assert_eq!(contact, s.t_accident);
            if let Some(t) = s.t_accident {
                let hazard = &s.agents[0];
                // At least two seconds of closing speed before contact.
                let moving = hazard.track[..t].iter().filter(|a| a.vx != 0.0 || a.vz != 0.0).count();
                assert!(moving >= 20, "{moving}");
            }
        }
    }

    #[test]
    fn distraction_raises_entropy() {
        let cfg = SimConfig::default();
        let mut pairs = 0;
        for i in 0..60u64 {
            let plan = Plan {
                positive: i % 2 == 0,
                regime: Regime::Reference,
            };
            let base = build(&mut Rng::derive(99, i), &plan, &cfg).unwrap();
            let mut rng = Rng::derive(5, i);
            let focus = base.agents.first().map(|a| {
                let start = a.track.iter().position(|s| s.vx != 0.0 || s.vz != 0.0).unwrap_or(0);
                (0, start.saturating_sub(1), base.t_accident.unwrap_or(cfg.frames / 2))
            });
            let attentive = render::attention(&mut rng.clone(), &cfg, &base.agents, focus, false);
            let distracted = render::attention(&mut rng, &cfg, &base.agents, focus, true);
            let mean = |t: &Tensor| {
                let n = cfg.grid * cfg.grid;
                (0..cfg.frames)
                    .map(|f| attention_entropy(&t.data()[f * n..(f + 1) * n]).unwrap())
                    .sum::<f64>()
                    / cfg.frames as f64
            };
            assert!(mean(&distracted) > mean(&attentive));
            pairs += 1;
        }
        assert!(pairs >= 50);
    }

    #[test]
    fn stress_regimes_alternate() {
        let s = generate_stress(43, 6, &SimConfig::default()).unwrap();
        for (i, seq) in s.iter().enumerate() {
            assert_eq!(seq.label, i % 2 == 1);
            let want = if i % 2 == 1 { Regime::Hazard } else { Regime::Benign };
            assert_eq!(seq.flags.regime, want);
        }
        assert!(s[1].agents.len() > s[0].agents.len());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SimConfig {
            p_occluded: 1.5,
            ..SimConfig::default()
        };
        assert!(matches!(generate(1, 2, 0.5, &cfg), Err(Error::Config(_))));
        assert!(matches!(generate(1, 2, 1.5, &SimConfig::default()), Err(Error::Config(_))));
    }
}
