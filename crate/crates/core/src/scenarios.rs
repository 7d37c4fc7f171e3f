//! Topology generators and channel allocation.
//!
//! Four layouts are provided:
//!
//! - a single AP with its stations evenly spread on a circle,
//! - *Scenario A*: a line of APs spaced `delta_x` apart, each with `N`
//!   stations on a circle of radius `delta`,
//! - *Scenario B*: the same AP line, stations uniformly placed in the
//!   square `[-delta, delta]^2` around their AP,
//! - the residential building: a grid of square rooms stacked in floors,
//!   one AP and `N` stations placed at random inside each room.
//!
//! Nodes are stored WLAN by WLAN, the AP first and then its stations.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{ChannelModel, Position};
use crate::{Error, NodeId, Result};

/// The 20 MHz channels of the 5 GHz band, in allocation order.
pub const CHANNELS_5GHZ: [u16; 25] = [
    36, 40, 44, 48, 52, 56, 60, 64, 100, 104, 108, 112, 116, 120, 124, 128, 132, 136, 140, 144,
    149, 153, 157, 161, 165,
];

/// Channel used when every AP shares one channel.
pub const DEFAULT_CHANNEL: u16 = 48;

/// Height of every node above its floor.
pub const NODE_HEIGHT_M: f64 = 1.5;

/// Positions closer than this are treated as coincident and redrawn.
const MIN_SEPARATION_M: f64 = 1e-3;

/// Stream ids keep scenario draws independent from the engine's per-node
/// streams derived from the same seed.
const PLACEMENT_STREAM: u64 = 0x5ce7_a410;
const CHANNEL_STREAM: u64 = 0xc4a7_7e15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildingGeometry {
    pub floors: u32,
    pub rooms_x: u32,
    pub rooms_y: u32,
    pub room_side_m: f64,
    pub floor_height_m: f64,
}

impl Default for BuildingGeometry {
    fn default() -> Self {
        BuildingGeometry {
            floors: 5,
            rooms_x: 10,
            rooms_y: 2,
            room_side_m: 10.0,
            floor_height_m: 3.0,
        }
    }
}

impl BuildingGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.floors == 0 || self.rooms_x == 0 || self.rooms_y == 0 {
            return Err(Error::config(
                "building needs at least one floor and one room",
            ));
        }
        if !(self.room_side_m > 0.0) || !(self.floor_height_m > NODE_HEIGHT_M) {
            return Err(Error::config(
                "room side must be positive and floor height above the node height",
            ));
        }
        Ok(())
    }

    pub fn rooms_per_floor(&self) -> u32 {
        self.rooms_x * self.rooms_y
    }

    pub fn total_rooms(&self) -> u32 {
        self.floors * self.rooms_per_floor()
    }

    /// `(floor, ix, iy)` of the room containing `p`, clamped to the grid.
    pub fn cell_of(&self, p: &Position) -> (u32, u32, u32) {
        let idx = |v: f64, step: f64, n: u32| -> u32 {
            let i = (v / step).floor();
            if i <= 0.0 {
                0
            } else {
                (i as u32).min(n - 1)
            }
        };
        (
            idx(p.z, self.floor_height_m, self.floors),
            idx(p.x, self.room_side_m, self.rooms_x),
            idx(p.y, self.room_side_m, self.rooms_y),
        )
    }

    /// Room index within its floor, row-major over `(ix, iy)`.
    pub fn room_on_floor(&self, ix: u32, iy: u32) -> u32 {
        iy * self.rooms_x + ix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Ap,
    Station,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub position: Position,
    pub role: Role,
    /// The AP a station sends to; an AP points at itself.
    pub ap: NodeId,
    pub wlan: usize,
    pub floor: Option<u32>,
    /// Room index within the floor, for building layouts.
    pub room: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    /// Channel of each WLAN, indexed by WLAN id.
    pub channel_map: Vec<u16>,
    pub building: Option<BuildingGeometry>,
}

impl Topology {
    pub fn n_wlans(&self) -> usize {
        self.channel_map.len()
    }

    pub fn channel_of(&self, node: NodeId) -> u16 {
        self.channel_map[self.nodes[node].wlan]
    }

    pub fn positions(&self) -> Vec<Position> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn stations(&self) -> impl Iterator<Item = (NodeId, &NodeSpec)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == Role::Station)
    }

    pub fn aps(&self) -> impl Iterator<Item = (NodeId, &NodeSpec)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == Role::Ap)
    }

    /// Checks associations, channel map coverage and position sanity.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::config("topology has no nodes"));
        }
        let mut ap_of_wlan: Vec<Option<NodeId>> = vec![None; self.n_wlans()];
        for (id, n) in self.nodes.iter().enumerate() {
            if n.wlan >= self.n_wlans() {
                return Err(Error::config(format!(
                    "node {id} belongs to WLAN {} with no channel assigned",
                    n.wlan
                )));
            }
            if !n.position.is_valid() {
                return Err(Error::config(format!("node {id} has an invalid position")));
            }
            if n.role == Role::Ap {
                if n.ap != id {
                    return Err(Error::config(format!("AP {id} must point at itself")));
                }
                if ap_of_wlan[n.wlan].replace(id).is_some() {
                    return Err(Error::config(format!("WLAN {} has two APs", n.wlan)));
                }
            }
        }
        for (id, n) in self.stations() {
            let ap = self.nodes.get(n.ap).ok_or_else(|| {
                Error::config(format!("station {id} is associated with a missing node"))
            })?;
            if ap.role != Role::Ap || ap.wlan != n.wlan {
                return Err(Error::config(format!(
                    "station {id} must be associated with the AP of its own WLAN"
                )));
            }
        }
        if ap_of_wlan.iter().any(Option::is_none) {
            return Err(Error::config("every WLAN needs exactly one AP"));
        }
        for i in 0..self.nodes.len() {
            for j in i + 1..self.nodes.len() {
                if self.nodes[i].position.distance(&self.nodes[j].position) < MIN_SEPARATION_M {
                    return Err(Error::config(format!("nodes {i} and {j} are co-located")));
                }
            }
        }
        Ok(())
    }
}

/// A topology together with the propagation model it is meant to run on.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub topology: Topology,
    pub channel: ChannelModel,
}

fn circle_wlan(
    nodes: &mut Vec<NodeSpec>,
    wlan: usize,
    center: Position,
    n_stations: usize,
    radius: f64,
) {
    let ap = nodes.len();
    nodes.push(NodeSpec {
        position: center,
        role: Role::Ap,
        ap,
        wlan,
        floor: None,
        room: None,
    });
    for j in 0..n_stations {
        let angle = j as f64 * std::f64::consts::TAU / n_stations as f64;
        nodes.push(NodeSpec {
            position: Position::new(
                center.x + radius * angle.cos(),
                center.y + radius * angle.sin(),
                center.z,
            ),
            role: Role::Station,
            ap,
            wlan,
            floor: None,
            room: None,
        });
    }
}

/// One AP at the origin and `n_stations` evenly spaced on a circle. With
/// `ideal`, every pair of nodes can decode each other.
pub fn gen_single_ap(n_stations: usize, radius_m: f64, ideal: bool) -> Result<Scenario> {
    if n_stations == 0 {
        return Err(Error::config(
            "single-AP scenario needs at least one station",
        ));
    }
    if !(radius_m > 0.0) {
        return Err(Error::config("radius must be positive"));
    }
    let mut nodes = Vec::with_capacity(n_stations + 1);
    circle_wlan(
        &mut nodes,
        0,
        Position::new(0.0, 0.0, NODE_HEIGHT_M),
        n_stations,
        radius_m,
    );
    let topology = Topology {
        nodes,
        channel_map: vec![DEFAULT_CHANNEL],
        building: None,
    };
    topology.validate()?;
    let channel = if ideal {
        let range = 2.0 * radius_m + 1.0;
        ChannelModel::disc(range, range)
    } else {
        ChannelModel::log_distance()
    };
    Ok(Scenario { topology, channel })
}

/// A line of `n_aps` WLANs spaced `delta_x_m` apart, stations on circles of
/// radius `delta_m`. Station `j` sits at angle `2 pi j / N`, so station 0
/// faces the next AP. The control variant uses a binary disc with both
/// ranges equal to `2 delta`.
pub fn gen_scenario_a(
    n_aps: usize,
    n_per_ap: usize,
    delta_x_m: f64,
    delta_m: f64,
    control: bool,
) -> Result<Scenario> {
    check_ap_line(n_aps, n_per_ap, delta_x_m, delta_m)?;
    let mut nodes = Vec::with_capacity(n_aps * (n_per_ap + 1));
    for i in 0..n_aps {
        let center = Position::new(i as f64 * delta_x_m, 0.0, NODE_HEIGHT_M);
        circle_wlan(&mut nodes, i, center, n_per_ap, delta_m);
    }
    let topology = Topology {
        nodes,
        channel_map: vec![DEFAULT_CHANNEL; n_aps],
        building: None,
    };
    topology.validate()?;
    let channel = if control {
        ChannelModel::disc(2.0 * delta_m, 2.0 * delta_m)
    } else {
        ChannelModel::log_distance()
    };
    Ok(Scenario { topology, channel })
}

fn check_ap_line(n_aps: usize, n_per_ap: usize, delta_x_m: f64, delta_m: f64) -> Result<()> {
    if n_aps == 0 || n_per_ap == 0 {
        return Err(Error::config("need at least one AP and one station per AP"));
    }
    if !(delta_x_m > 0.0) || !(delta_m > 0.0) {
        return Err(Error::config(
            "AP spacing and station radius must be positive",
        ));
    }
    Ok(())
}

/// The AP line of Scenario A with stations placed uniformly at random in
/// the square `[-delta, delta]^2` centred on their AP.
pub fn gen_scenario_b(
    n_aps: usize,
    n_per_ap: usize,
    delta_x_m: f64,
    delta_m: f64,
    seed: u64,
) -> Result<Scenario> {
    check_ap_line(n_aps, n_per_ap, delta_x_m, delta_m)?;
    let mut rng = placement_rng(seed);
    let mut nodes = Vec::with_capacity(n_aps * (n_per_ap + 1));
    for i in 0..n_aps {
        let center = Position::new(i as f64 * delta_x_m, 0.0, NODE_HEIGHT_M);
        let ap = nodes.len();
        nodes.push(NodeSpec {
            position: center,
            role: Role::Ap,
            ap,
            wlan: i,
            floor: None,
            room: None,
        });
        for _ in 0..n_per_ap {
            let position = draw_distinct(&mut rng, &nodes, |r| {
                Position::new(
                    center.x + r.gen_range(-delta_m..=delta_m),
                    center.y + r.gen_range(-delta_m..=delta_m),
                    NODE_HEIGHT_M,
                )
            });
            nodes.push(NodeSpec {
                position,
                role: Role::Station,
                ap,
                wlan: i,
                floor: None,
                room: None,
            });
        }
    }
    let topology = Topology {
        nodes,
        channel_map: vec![DEFAULT_CHANNEL; n_aps],
        building: None,
    };
    topology.validate()?;
    Ok(Scenario {
        topology,
        channel: ChannelModel::log_distance(),
    })
}

/// One AP and `n_per_ap` stations at random inside every room of the
/// building, all at 1.5 m above their floor. Channels start out shared;
/// see [`allocate_channels`].
pub fn gen_hew_building(
    geometry: BuildingGeometry,
    n_per_ap: usize,
    seed: u64,
) -> Result<Scenario> {
    geometry.validate()?;
    let mut rng = placement_rng(seed);
    let l = geometry.room_side_m;
    let mut nodes = Vec::with_capacity(geometry.total_rooms() as usize * (n_per_ap + 1));
    let mut wlan = 0;
    for floor in 0..geometry.floors {
        let z = floor as f64 * geometry.floor_height_m + NODE_HEIGHT_M;
        for iy in 0..geometry.rooms_y {
            for ix in 0..geometry.rooms_x {
                let room = geometry.room_on_floor(ix, iy);
                let in_room = |r: &mut ChaCha8Rng| {
                    Position::new(
                        (ix as f64 + r.gen::<f64>()) * l,
                        (iy as f64 + r.gen::<f64>()) * l,
                        z,
                    )
                };
                let ap = nodes.len();
                let room_start = nodes.len();
                for k in 0..=n_per_ap {
                    let position = draw_distinct(&mut rng, &nodes[room_start..], in_room);
                    nodes.push(NodeSpec {
                        position,
                        role: if k == 0 { Role::Ap } else { Role::Station },
                        ap,
                        wlan,
                        floor: Some(floor),
                        room: Some(room),
                    });
                }
                wlan += 1;
            }
        }
    }
    let topology = Topology {
        nodes,
        channel_map: vec![DEFAULT_CHANNEL; wlan],
        building: Some(geometry),
    };
    topology.validate()?;
    Ok(Scenario {
        topology,
        channel: ChannelModel::log_distance(),
    })
}

fn placement_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PLACEMENT_STREAM);
    rng
}

fn draw_distinct<F>(rng: &mut ChaCha8Rng, existing: &[NodeSpec], mut draw: F) -> Position
where
    F: FnMut(&mut ChaCha8Rng) -> Position,
{
    loop {
        let p = draw(rng);
        if existing
            .iter()
            .all(|n| n.position.distance(&p) >= MIN_SEPARATION_M)
        {
            return p;
        }
    }
}

/// Explicit `(floor, room) -> channel` assignment.
pub type ChannelMapFile = BTreeMap<(u32, u32), u16>;

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPolicy {
    /// Every AP on channel 48.
    SingleChannel,
    /// Eight channels in a repeating room pattern. Even floors use pattern
    /// A, odd floors pattern B, which is A shifted by four channels so that
    /// vertically adjacent rooms never share a channel.
    EightTypeAB,
    /// Twenty channels handed out room by room in building order; with
    /// twenty rooms per floor every floor gets the same map and no two rooms
    /// of a floor share a channel.
    TwentyGrid,
    /// Independent uniform choice among the first `C` channels.
    RandomFrom(usize),
    Explicit(ChannelMapFile),
}

impl ChannelPolicy {
    pub fn name(&self) -> String {
        match self {
            ChannelPolicy::SingleChannel => "single".into(),
            ChannelPolicy::EightTypeAB => "eight_ab".into(),
            ChannelPolicy::TwentyGrid => "twenty".into(),
            ChannelPolicy::RandomFrom(c) => format!("random{c}"),
            ChannelPolicy::Explicit(_) => "explicit".into(),
        }
    }
}

/// Eight-channel room pattern: pattern A on even floors, B (A shifted by 4)
/// on odd floors.
pub fn eight_type_ab_index(floor: u32, ix: u32, iy: u32) -> usize {
    let shift = if floor % 2 == 1 { 4 } else { 0 };
    ((ix + 4 * iy + shift) % 8) as usize
}

/// Assigns a channel to every WLAN. Positions and associations are left
/// untouched.
pub fn allocate_channels(
    mut topology: Topology,
    policy: &ChannelPolicy,
    seed: u64,
) -> Result<Topology> {
    let needs_building = || {
        topology.building.ok_or_else(|| {
            Error::config(format!(
                "channel policy `{}` needs a building layout",
                policy.name()
            ))
        })
    };
    let mut map = Vec::with_capacity(topology.n_wlans());
    match policy {
        ChannelPolicy::SingleChannel => map.resize(topology.n_wlans(), DEFAULT_CHANNEL),
        ChannelPolicy::RandomFrom(c) => {
            if *c == 0 || *c > CHANNELS_5GHZ.len() {
                return Err(Error::config(format!(
                    "random allocation needs 1..={} channels, got {c}",
                    CHANNELS_5GHZ.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(CHANNEL_STREAM);
            for _ in 0..topology.n_wlans() {
                map.push(CHANNELS_5GHZ[rng.gen_range(0..*c)]);
            }
        }
        ChannelPolicy::EightTypeAB | ChannelPolicy::TwentyGrid | ChannelPolicy::Explicit(_) => {
            let building = needs_building()?;
            for (_, ap) in topology.aps() {
                let (floor, ix, iy) = building.cell_of(&ap.position);
                let room = building.room_on_floor(ix, iy);
                let channel = match policy {
                    ChannelPolicy::EightTypeAB => CHANNELS_5GHZ[eight_type_ab_index(floor, ix, iy)],
                    ChannelPolicy::TwentyGrid => {
                        let q = floor * building.rooms_per_floor() + room;
                        CHANNELS_5GHZ[(q % 20) as usize]
                    }
                    ChannelPolicy::Explicit(file) => {
                        *file.get(&(floor, room)).ok_or_else(|| {
                            Error::config(format!(
                                "channel map has no entry for floor {floor} room {room}"
                            ))
                        })?
                    }
                    _ => unreachable!(),
                };
                map.push(channel);
            }
        }
    }
    topology.channel_map = map;
    Ok(topology)
}

/// Parses a channel map: one `floor room channel` triple per line. Blank
/// lines and `#` comments are skipped.
pub fn parse_channel_map(text: &str) -> Result<ChannelMapFile> {
    let mut map = ChannelMapFile::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<(u32, u32, u16)> = match fields.as_slice() {
            [f, r, c] => (|| Some((f.parse().ok()?, r.parse().ok()?, c.parse().ok()?)))(),
            _ => None,
        };
        let (floor, room, channel) = parsed.ok_or_else(|| {
            Error::config(format!(
                "channel map line {}: expected `floor room channel`, got `{line}`",
                i + 1
            ))
        })?;
        if map.insert((floor, room), channel).is_some() {
            return Err(Error::config(format!(
                "channel map line {}: duplicate entry for floor {floor} room {room}",
                i + 1
            )));
        }
    }
    Ok(map)
}
