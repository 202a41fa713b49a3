//! Spatially grounded alert text from agent geometry and the risk state.
//!
//! Bearings are measured from straight ahead (`+z`), positive to the right,
//! in `(−180, 180]` degrees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RiskTrace;
use crate::sim::{world_to_grid, AgentClass, Sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sector {
    #[serde(rename = "ahead")]
    Ahead,
    #[serde(rename = "front-right")]
    FrontRight,
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "right blind spot")]
    RightBlindSpot,
    #[serde(rename = "behind")]
    Behind,
    #[serde(rename = "left blind spot")]
    LeftBlindSpot,
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "front-left")]
    FrontLeft,
}

impl Sector {
    pub const ALL: [Sector; 8] = [
        Sector::Ahead,
        Sector::FrontRight,
        Sector::Right,
        Sector::RightBlindSpot,
        Sector::Behind,
        Sector::LeftBlindSpot,
        Sector::Left,
        Sector::FrontLeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sector::Ahead => "ahead",
            Sector::FrontRight => "front-right",
            Sector::Right => "right",
            Sector::RightBlindSpot => "right blind spot",
            Sector::Behind => "behind",
            Sector::LeftBlindSpot => "left blind spot",
            Sector::Left => "left",
            Sector::FrontLeft => "front-left",
        }
    }

    /// The sector on the other side of the symmetry axis.
    pub fn mirror(self) -> Sector {
        match self {
            Sector::FrontRight => Sector::FrontLeft,
            Sector::FrontLeft => Sector::FrontRight,
            Sector::Right => Sector::Left,
            Sector::Left => Sector::Right,
            Sector::RightBlindSpot => Sector::LeftBlindSpot,
            Sector::LeftBlindSpot => Sector::RightBlindSpot,
            s => s,
        }
    }

    /// Bin of a bearing in `(−180, 180]`.
    pub fn of_bearing(b: f64) -> Sector {
        if (-15.0..=15.0).contains(&b) {
            Sector::Ahead
        } else if b > 15.0 && b <= 75.0 {
            Sector::FrontRight
        } else if b > 75.0 && b <= 105.0 {
            Sector::Right
        } else if b > 105.0 && b <= 150.0 {
            Sector::RightBlindSpot
        } else if b > 150.0 || b <= -150.0 {
            Sector::Behind
        } else if b <= -105.0 {
            Sector::LeftBlindSpot
        } else if b <= -75.0 {
            Sector::Left
        } else {
            Sector::FrontLeft
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialReference {
    /// Metres, rounded to 0.1.
    pub distance_m: f64,
    pub bearing_deg: f64,
    pub sector: Sector,
}

pub fn locate(x: f64, z: f64) -> Result<SpatialReference> {
    if !x.is_finite() || !z.is_finite() {
        return Err(Error::Input(format!("non-finite position ({x}, {z})")));
    }
    if x == 0.0 && z == 0.0 {
        return Err(Error::Input("agent at the ego origin has no bearing".into()));
    }
    let mut bearing = x.atan2(z).to_degrees();
    if bearing <= -180.0 {
        bearing = 180.0;
    }
    Ok(SpatialReference {
        distance_m: (x.hypot(z) * 10.0).round() / 10.0,
        bearing_deg: bearing,
        sector: Sector::of_bearing(bearing),
    })
}

pub const WINDS: [&str; 8] = [
    "north",
    "northeast",
    "east",
    "southeast",
    "south",
    "southwest",
    "west",
    "northwest",
];

/// 8-wind word for an ego-relative bearing given the ego heading (degrees
/// clockwise from north). Each wind covers 45° starting 22.5° before it.
pub fn compass_word(bearing_deg: f64, heading_deg: f64) -> &'static str {
    let b = (bearing_deg + heading_deg).rem_euclid(360.0);
    WINDS[(((b + 22.5) / 45.0).floor() as usize) % 8]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertMode {
    EgoRelative,
    Compass { heading_deg: f64 },
}

fn capitalised(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Alert text. The risk clause is appended only when `p > tau`.
pub fn render_alert(class: AgentClass, at: &SpatialReference, p: f64, tau: f64, mode: AlertMode) -> String {
    let class = capitalised(class.name());
    let mut s = match mode {
        AlertMode::EgoRelative => format!("{class} {:.1}m in {}", at.distance_m, at.sector.name()),
        AlertMode::Compass { heading_deg } => {
            format!("{class} {:.1}m {}", at.distance_m, compass_word(at.bearing_deg, heading_deg))
        }
    };
    if p > tau {
        s.push_str(&format!(" — risk {p:.2} above threshold {tau:.2}"));
    }
    s
}

/// Candidate agent for linking: id and world position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub id: u16,
    pub x: f64,
    pub z: f64,
}

fn nearest(cell: (usize, usize), side: usize, agents: &[Candidate]) -> Result<u16> {
    let (row, col) = (cell.0 as f64, cell.1 as f64);
    agents
        .iter()
        .map(|a| {
            let (r, c) = world_to_grid(a.x, a.z, side);
            ((r - row).hypot(c - col), a.id)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| Error::Input("no agents to link the risk peak to".into()))
}

/// Agent nearest (in grid cells) to the argmax of a `side × side` risk map.
/// The first maximum in row-major order wins; equidistant agents resolve to
/// the smaller id.
pub fn link_risk_peak(risk_map: &[f64], side: usize, agents: &[Candidate]) -> Result<u16> {
    if risk_map.len() != side * side || side == 0 {
        return Err(Error::Dimension(format!(
            "risk map has {} cells, expected {side}×{side}",
            risk_map.len()
        )));
    }
    let arg = risk_map
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    nearest((arg / side, arg % side), side, agents)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub frame: usize,
    pub agent_id: u16,
    pub class: AgentClass,
    pub distance_m: f64,
    pub bearing_deg: f64,
    pub sector: Sector,
    pub p: f64,
    pub tau: f64,
    pub text: String,
}

/// Alerts for one sequence. Frames with `p > τ` raise an alert about the
/// visible agent nearest the risk peak; `describe_all` reports every frame.
/// `side` is the risk-map resolution.
pub fn alerts(seq: &Sequence, trace: &RiskTrace, side: usize, mode: AlertMode, describe_all: bool) -> Result<Vec<Alert>> {
    if trace.p.len() != seq.frames() {
        return Err(Error::Dimension(format!(
            "trace has {} frames, sequence {}",
            trace.p.len(),
            seq.frames()
        )));
    }
    let mut out = Vec::new();
    for t in 0..seq.frames() {
        let (p, tau) = (trace.p[t], trace.tau[t]);
        if !describe_all && p <= tau {
            continue;
        }
        let visible: Vec<Candidate> = seq
            .agents
            .iter()
            .filter(|a| !a.hidden[t])
            .map(|a| Candidate {
                id: a.id,
                x: a.track[t].x,
                z: a.track[t].z,
            })
            .filter(|c| c.x != 0.0 || c.z != 0.0)
            .collect();
        if visible.is_empty() {
            continue;
        }
        let [px, py] = trace.risk_peak[t];
        let id = nearest((py, px), side, &visible)?;
        let agent = seq.agents.iter().find(|a| a.id == id).expect("linked agent exists");
        let s = agent.track[t];
        let at = locate(s.x, s.z)?;
        out.push(Alert {
            frame: t,
            agent_id: id,
            class: agent.class,
            distance_m: at.distance_m,
            bearing_deg: at.bearing_deg,
            sector: at.sector,
            p,
            tau,
            text: render_alert(agent.class, &at, p, tau, mode),
        });
    }
    Ok(out)
}

/// One JSON object per line.
pub fn to_jsonl(alerts: &[Alert]) -> String {
    alerts
        .iter()
        .map(|a| serde_json::to_string(a).expect("alert serialises") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn straight_ahead() {
        let r = locate(0.0, 5.0).unwrap();
        assert_eq!(r.distance_m, 5.0);
        assert_eq!(r.bearing_deg, 0.0);
        assert_eq!(r.sector, Sector::Ahead);
    }

    #[test]
    fn left_rear_exemplar() {
        let r = locate(-2.068, -0.365).unwrap();
        assert_eq!(r.distance_m, 2.1);
        assert!((r.bearing_deg + 100.0).abs() < 0.01, "{}", r.bearing_deg);
        // −100° lies in the (−105, −75] bin.
        assert_eq!(r.sector, Sector::Left);
    }

    #[test]
    fn golden_left_blind_spot_text() {
        let r = locate(-1.819, -1.050).unwrap();
        assert_eq!(r.distance_m, 2.1);
        assert_eq!(r.sector, Sector::LeftBlindSpot);
        assert_eq!(
            render_alert(AgentClass::Pedestrian, &r, 0.62, 0.47, AlertMode::EgoRelative),
            "Pedestrian 2.1m in left blind spot — risk 0.62 above threshold 0.47"
        );
        assert_eq!(
            render_alert(AgentClass::Pedestrian, &r, 0.40, 0.47, AlertMode::EgoRelative),
            "Pedestrian 2.1m in left blind spot"
        );
    }

    #[test]
    fn compass_words() {
        assert_eq!(compass_word(45.0, 0.0), "northeast");
        assert_eq!(compass_word(0.0, 0.0), "north");
        assert_eq!(compass_word(-100.0, 0.0), "west");
        assert_eq!(compass_word(10.0, 180.0), "south");
        let r = locate(3.0, 3.0).unwrap();
        assert_eq!(
            render_alert(AgentClass::Bus, &r, 0.9, 0.5, AlertMode::Compass { heading_deg: 90.0 }),
            "Bus 4.2m southeast — risk 0.90 above threshold 0.50"
        );
    }

    #[test]
    fn origin_rejected() {
        assert!(matches!(locate(0.0, 0.0), Err(Error::Input(_))));
        assert!(locate(0.0, -3.0).unwrap().bearing_deg == 180.0);
        assert!(locate(-0.0, -3.0).unwrap().bearing_deg == 180.0);
    }

    #[test]
    fn peak_linking() {
        let side = 8;
        let a = Candidate { id: 4, x: -5.0, z: 30.0 };
        let mut map = vec![0.0; 64];
        map[13] = 1.0;
        assert_eq!(link_risk_peak(&map, side, &[a]).unwrap(), 4);

        // Put the peak exactly on A's cell with B elsewhere.
        let (r, c) = world_to_grid(a.x, a.z, side);
        let (r, c) = (r.round() as usize, c.round() as usize);
        let mut map = vec![0.0; 64];
        map[r * side + c] = 1.0;
        let b = Candidate { id: 1, x: 15.0, z: 0.0 };
        assert_eq!(link_risk_peak(&map, side, &[b, a]).unwrap(), 4);

        // Column 4 sits at x = 2.5 m, so agents at −2.5 m and 7.5 m on the
        // same row are equidistant from the peak.
        let (r, _) = world_to_grid(0.0, 30.0, side);
        let mut map = vec![0.0; 64];
        map[r.round() as usize * side + 4] = 1.0;
        let five = Candidate { id: 5, x: -2.5, z: 30.0 };
        let two = Candidate { id: 2, x: 7.5, z: 30.0 };
        assert_eq!(link_risk_peak(&map, side, &[five, two]).unwrap(), 2);
        assert_eq!(link_risk_peak(&map, side, &[two, five]).unwrap(), 2);
        assert!(link_risk_peak(&map, side, &[]).is_err());
        assert!(link_risk_peak(&map[..10], side, &[a]).is_err());
    }

    #[test]
    fn sector_names_serialise() {
        assert_eq!(serde_json::to_string(&Sector::LeftBlindSpot).unwrap(), "\"left blind spot\"");
        for s in Sector::ALL {
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn sectors_partition_the_circle() {
        // Dense grid over (−180, 180]: every bearing lands in exactly one bin
        // and the bins are contiguous arcs.
        let mut seen = Vec::new();
        let n = 360_000;
        for i in 1..=n {
            let b = -180.0 + 360.0 * i as f64 / n as f64;
            let s = Sector::of_bearing(b);
            if seen.last() != Some(&s) {
                seen.push(s);
            }
        }
        // Starts and ends in "behind"; the other seven appear once each.
        assert_eq!(seen.first(), Some(&Sector::Behind));
        assert_eq!(seen.last(), Some(&Sector::Behind));
        assert_eq!(seen.len(), 9);
        for s in Sector::ALL {
            let k = seen.iter().filter(|&&x| x == s).count();
            assert_eq!(k, if s == Sector::Behind { 2 } else { 1 }, "{s:?}");
        }
        for (b, s) in [
            (15.0, Sector::Ahead),
            (-15.0, Sector::Ahead),
            (75.0, Sector::FrontRight),
            (-75.0, Sector::Left),
            (105.0, Sector::Right),
            (-105.0, Sector::LeftBlindSpot),
            (150.0, Sector::RightBlindSpot),
            (-150.0, Sector::Behind),
            (180.0, Sector::Behind),
        ] {
            assert_eq!(Sector::of_bearing(b), s, "{b}");
        }
    }

    proptest! {
        #[test]
        fn polar_round_trip(d in 0.05f64..60.0, b in -179.999f64..=180.0) {
            let r = b.to_radians();
            let at = locate(d * r.sin(), d * r.cos()).unwrap();
            prop_assert!((at.distance_m - d).abs() <= 0.05 + 1e-12);
            prop_assert!((at.bearing_deg - b).abs() < 1e-9);
        }

        #[test]
        fn mirrored_positions_mirror_sectors(x in -30.0f64..30.0, z in -30.0f64..30.0) {
            prop_assume!(x.hypot(z) > 1e-6);
            let a = locate(x, z).unwrap();
            let boundaries = [15.0, 75.0, 105.0, 150.0];
            prop_assume!(boundaries.iter().all(|e| (a.bearing_deg.abs() - e).abs() > 1e-9));
            prop_assert_eq!(locate(-x, z).unwrap().sector, a.sector.mirror());
        }
    }
}
