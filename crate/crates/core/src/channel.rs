//! Propagation and physical carrier sense.
//!
//! Two interchangeable channel models are supported. [`ChannelModel::BinaryDisc`]
//! is the idealised "everything inside the range is perfect" model: a
//! transmission is decodable inside `tx_range_m`, only sensed inside
//! `cs_range_m`, and absent beyond. [`ChannelModel::LogDistance`] uses the
//! indoor log-distance law with a 5 m breakpoint and per-wall / per-floor
//! penetration losses:
//!
//! ```text
//! PL(x) = 40.05 + 20 log10(fc / 5 GHz) + 20 log10(min(x, 5))
//!         + [x > 5] 35 log10(x / 5) + 17 Z + 12 W
//! ```
//!
//! All functions here are pure.

use crate::scenarios::BuildingGeometry;
use crate::{Error, Result};

/// Tolerance used for range-boundary comparisons, so that nodes placed
/// exactly on a disc boundary are inside it despite rounding.
const RANGE_EPS_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Position { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.z >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    pub carrier_frequency_hz: f64,
    pub per_wall_db: f64,
    pub per_floor_db: f64,
    pub breakpoint_m: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        PathLossParams {
            carrier_frequency_hz: 5.24e9,
            per_wall_db: 12.0,
            per_floor_db: 17.0,
            breakpoint_m: 5.0,
        }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_frequency_hz > 0.0) {
            return Err(Error::config("carrier frequency must be positive"));
        }
        if !(self.per_wall_db >= 0.0) || !(self.per_floor_db >= 0.0) {
            return Err(Error::config("wall and floor losses must be non-negative"));
        }
        if !(self.breakpoint_m > 0.0) {
            return Err(Error::config("breakpoint distance must be positive"));
        }
        Ok(())
    }
}

/// Walls and floors crossed by a link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ObstacleCount {
    pub walls: u32,
    pub floors: u32,
}

impl ObstacleCount {
    pub const NONE: ObstacleCount = ObstacleCount {
        walls: 0,
        floors: 0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelModel {
    BinaryDisc {
        tx_range_m: f64,
        cs_range_m: f64,
    },
    LogDistance {
        params: PathLossParams,
        noise_floor_dbm: f64,
        /// SINR threshold for capture; `None` means any overlapping
        /// detectable frame corrupts the reception.
        capture_threshold_db: Option<f64>,
    },
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel::log_distance()
    }
}

impl ChannelModel {
    pub const DEFAULT_NOISE_FLOOR_DBM: f64 = -94.0;
    pub const DEFAULT_CAPTURE_DB: f64 = 20.0;

    /// Log-distance model with the default building losses and capture off.
    pub fn log_distance() -> Self {
        ChannelModel::LogDistance {
            params: PathLossParams::default(),
            noise_floor_dbm: Self::DEFAULT_NOISE_FLOOR_DBM,
            capture_threshold_db: None,
        }
    }

    pub fn disc(tx_range_m: f64, cs_range_m: f64) -> Self {
        ChannelModel::BinaryDisc {
            tx_range_m,
            cs_range_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ChannelModel::BinaryDisc {
                tx_range_m,
                cs_range_m,
            } => {
                if !(tx_range_m > 0.0 && tx_range_m <= cs_range_m) {
                    return Err(Error::config(format!(
                        "binary disc needs 0 < tx_range ({tx_range_m}) <= cs_range ({cs_range_m})"
                    )));
                }
            }
            ChannelModel::LogDistance {
                params,
                noise_floor_dbm,
                capture_threshold_db,
            } => {
                params.validate()?;
                if !(noise_floor_dbm < -60.0) {
                    return Err(Error::config("noise floor must be below -60 dBm"));
                }
                if let Some(c) = capture_threshold_db {
                    if !c.is_finite() {
                        return Err(Error::config("capture threshold must be finite"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenseThresholds {
    /// Aggregate energy above which the medium is busy.
    pub cca_energy_dbm: f64,
    /// Minimum arrival power for a frame to be detected and decoded.
    pub frame_detect_dbm: f64,
    pub tx_power_dbm: f64,
}

impl Default for SenseThresholds {
    fn default() -> Self {
        SenseThresholds {
            cca_energy_dbm: -62.0,
            frame_detect_dbm: -82.0,
            tx_power_dbm: 15.0,
        }
    }
}

impl SenseThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_detect_dbm < self.cca_energy_dbm) {
            return Err(Error::config(
                "frame detection threshold must be below the CCA energy threshold",
            ));
        }
        if !self.tx_power_dbm.is_finite() {
            return Err(Error::config("tx power must be finite"));
        }
        Ok(())
    }
}

/// What a receiver gets from one transmitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arrival {
    /// Signal at the given power (dBm).
    Power(f64),
    /// Disc model only: inside carrier-sense range but beyond decoding range.
    SensableOnly,
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SenseState {
    Idle,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReceptionOutcome {
    Decoded,
    Corrupted,
    Undetected,
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Path loss in dB over `distance` metres.
pub fn path_loss(distance: f64, params: &PathLossParams, obstacles: ObstacleCount) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::Domain(format!(
            "path loss needs a positive distance, got {distance}"
        )));
    }
    let bp = params.breakpoint_m;
    let mut loss = 40.05
        + 20.0 * (params.carrier_frequency_hz / 5e9).log10()
        + 20.0 * distance.min(bp).log10();
    if distance > bp {
        loss += 35.0 * (distance / bp).log10();
    }
    loss += params.per_floor_db * f64::from(obstacles.floors);
    loss += params.per_wall_db * f64::from(obstacles.walls);
    Ok(loss)
}

pub fn received_power(
    tx_power_dbm: f64,
    tx: &Position,
    rx: &Position,
    model: &ChannelModel,
    obstacles: ObstacleCount,
) -> Result<Arrival> {
    let d = tx.distance(rx);
    match *model {
        ChannelModel::LogDistance { ref params, .. } => Ok(Arrival::Power(
            tx_power_dbm - path_loss(d, params, obstacles)?,
        )),
        ChannelModel::BinaryDisc {
            tx_range_m,
            cs_range_m,
        } => {
            if !(d > 0.0) {
                return Err(Error::Domain(
                    "transmitter and receiver are co-located".into(),
                ));
            }
            Ok(if d <= tx_range_m + RANGE_EPS_M {
                Arrival::Power(tx_power_dbm)
            } else if d <= cs_range_m + RANGE_EPS_M {
                Arrival::SensableOnly
            } else {
                Arrival::Unreachable
            })
        }
    }
}

/// Counts the room-boundary planes and floors between two points of a grid
/// building. Without a building nothing is in the way.
pub fn count_obstacles(
    tx: &Position,
    rx: &Position,
    building: Option<&BuildingGeometry>,
) -> ObstacleCount {
    let Some(b) = building else {
        return ObstacleCount::NONE;
    };
    let (fx, ix, iy) = b.cell_of(tx);
    let (gx, jx, jy) = b.cell_of(rx);
    ObstacleCount {
        walls: ix.abs_diff(jx) + iy.abs_diff(jy),
        floors: fx.abs_diff(gx),
    }
}

/// Physical carrier sense over the arrivals of all concurrent transmissions
/// on the listener's channel.
pub fn carrier_sense_state<I>(arrivals: I, thresholds: &SenseThresholds) -> SenseState
where
    I: IntoIterator<Item = Arrival>,
{
    let cca_mw = dbm_to_mw(thresholds.cca_energy_dbm);
    let mut energy_mw = 0.0;
    for a in arrivals {
        match a {
            Arrival::Unreachable => {}
            Arrival::SensableOnly => return SenseState::Busy,
            Arrival::Power(p) => {
                if p >= thresholds.frame_detect_dbm {
                    return SenseState::Busy;
                }
                energy_mw += dbm_to_mw(p);
                if energy_mw >= cca_mw {
                    return SenseState::Busy;
                }
            }
        }
    }
    SenseState::Idle
}

/// Is this arrival detectable as a frame by itself (and hence corrupting
/// when it overlaps another reception)?
pub fn is_detectable(arrival: Arrival, thresholds: &SenseThresholds) -> bool {
    match arrival {
        Arrival::Power(p) => p >= thresholds.frame_detect_dbm,
        Arrival::SensableOnly => true,
        Arrival::Unreachable => false,
    }
}

/// Outcome of one frame at its receiver given every other transmission on
/// the same channel that overlapped it in time.
pub fn reception_outcome<I>(
    frame: Arrival,
    overlapping: I,
    model: &ChannelModel,
    thresholds: &SenseThresholds,
) -> ReceptionOutcome
where
    I: IntoIterator<Item = Arrival>,
{
    let signal = match frame {
        Arrival::Power(p) if p >= thresholds.frame_detect_dbm => p,
        _ => return ReceptionOutcome::Undetected,
    };
    let capture = match *model {
        ChannelModel::LogDistance {
            noise_floor_dbm,
            capture_threshold_db: Some(th),
            ..
        } => Some((noise_floor_dbm, th)),
        _ => None,
    };
    match capture {
        None => {
            if overlapping
                .into_iter()
                .any(|a| is_detectable(a, thresholds))
            {
                ReceptionOutcome::Corrupted
            } else {
                ReceptionOutcome::Decoded
            }
        }
        Some((noise_dbm, threshold_db)) => {
            let mut denom_mw = dbm_to_mw(noise_dbm);
            for a in overlapping {
                match a {
                    Arrival::Power(p) => denom_mw += dbm_to_mw(p),
                    // cannot happen under LogDistance; treat as saturating
                    Arrival::SensableOnly => return ReceptionOutcome::Corrupted,
                    Arrival::Unreachable => {}
                }
            }
            if signal - mw_to_dbm(denom_mw) >= threshold_db {
                ReceptionOutcome::Decoded
            } else {
                ReceptionOutcome::Corrupted
            }
        }
    }
}

/// One precomputed directed link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub arrival: Arrival,
    /// Arrival power in mW, zero unless the arrival is a [`Arrival::Power`].
    pub mw: f64,
    pub detectable: bool,
}

/// Precomputed arrivals for every ordered pair of nodes.
#[derive(Debug, Clone)]
pub struct LinkTable {
    n: usize,
    links: Vec<Link>,
    thresholds: SenseThresholds,
    cca_mw: f64,
}

impl LinkTable {
    pub fn build(
        positions: &[Position],
        building: Option<&BuildingGeometry>,
        model: &ChannelModel,
        thresholds: &SenseThresholds,
    ) -> Result<Self> {
        let n = positions.len();
        let mut links = Vec::with_capacity(n * n);
        for (i, tx) in positions.iter().enumerate() {
            for (j, rx) in positions.iter().enumerate() {
                let arrival = if i == j {
                    Arrival::Unreachable
                } else {
                    let obstacles = count_obstacles(tx, rx, building);
                    received_power(thresholds.tx_power_dbm, tx, rx, model, obstacles)?
                };
                let mw = match arrival {
                    Arrival::Power(p) => dbm_to_mw(p),
                    _ => 0.0,
                };
                links.push(Link {
                    arrival,
                    mw,
                    detectable: is_detectable(arrival, thresholds),
                });
            }
        }
        Ok(LinkTable {
            n,
            links,
            thresholds: *thresholds,
            cca_mw: dbm_to_mw(thresholds.cca_energy_dbm),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn link(&self, tx: usize, rx: usize) -> &Link {
        &self.links[tx * self.n + rx]
    }

    #[inline]
    pub fn arrival(&self, tx: usize, rx: usize) -> Arrival {
        self.link(tx, rx).arrival
    }

    /// [`carrier_sense_state`] at `rx` with the given transmitters on air,
    /// using the cached linear powers.
    pub fn sense<I>(&self, transmitters: I, rx: usize) -> SenseState
    where
        I: IntoIterator<Item = usize>,
    {
        let mut energy = 0.0;
        for tx in transmitters {
            let l = self.link(tx, rx);
            if l.detectable {
                return SenseState::Busy;
            }
            energy += l.mw;
        }
        if energy >= self.cca_mw {
            SenseState::Busy
        } else {
            SenseState::Idle
        }
    }

    pub fn thresholds(&self) -> &SenseThresholds {
        &self.thresholds
    }
}
