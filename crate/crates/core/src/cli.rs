//! Batch runs from a line-oriented `key = value` specification.
//!
//! A specification names a scenario, a list of protocols, a number of
//! iterations and a base seed; iteration `i` runs with seed `seed + i`. A
//! list of station counts turns the run into a sweep. [`execute`] writes one
//! raw CSV per run, aggregate CSVs per grouping, plot series and a
//! `manifest.txt` that is itself a valid specification reproducing the run.
//!
//! ```text
//! scenario  = scenario_b
//! protocols = dcf, eca, eca_hyst_sr
//! stations  = 20
//! aps       = 10
//! iterations = 5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::channel::{ChannelModel, PathLossParams};
use crate::engine::{self, CountdownRule, RunResult, SimConfig};
use crate::mac::ProtocolKind;
use crate::metrics::{self, Grouping, SummaryRow};
use crate::scenarios::{
    allocate_channels, gen_hew_building, gen_scenario_a, gen_scenario_b, gen_single_ap,
    parse_channel_map, BuildingGeometry, ChannelPolicy, Role, Scenario,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    SingleAp,
    ScenarioA,
    ScenarioB,
    Hew,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::SingleAp => "single_ap",
            ScenarioKind::ScenarioA => "scenario_a",
            ScenarioKind::ScenarioB => "scenario_b",
            ScenarioKind::Hew => "hew",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single_ap" | "single" => Some(ScenarioKind::SingleAp),
            "scenario_a" | "a" => Some(ScenarioKind::ScenarioA),
            "scenario_b" | "b" => Some(ScenarioKind::ScenarioB),
            "hew" | "building" => Some(ScenarioKind::Hew),
            _ => None,
        }
    }
}

/// A fully resolved batch run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scenario: ScenarioKind,
    pub protocols: Vec<ProtocolKind>,
    pub iterations: u32,
    pub base_seed: u64,
    pub duration_s: f64,
    pub output_dir: PathBuf,
    /// Stations per AP; more than one value runs a sweep.
    pub stations: Vec<usize>,
    pub aps: usize,
    pub delta_x_m: f64,
    pub delta_m: f64,
    pub radius_m: f64,
    pub ideal: bool,
    pub control: bool,
    pub building: BuildingGeometry,
    pub channel_policy: ChannelPolicy,
    pub channel_map_file: Option<PathBuf>,
    pub path_loss: PathLossParams,
    pub noise_floor_dbm: f64,
    pub capture_db: Option<f64>,
    /// PHY, MAC and engine knobs. `duration_s`, `seed`, `protocol` and
    /// `channel` are filled in per run.
    pub sim: SimConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            scenario: ScenarioKind::SingleAp,
            protocols: vec![ProtocolKind::Dcf],
            iterations: 5,
            base_seed: 1,
            duration_s: 25.0,
            output_dir: PathBuf::from("results"),
            stations: vec![10],
            aps: 3,
            delta_x_m: 15.0,
            delta_m: 5.0,
            radius_m: 5.0,
            ideal: true,
            control: false,
            building: BuildingGeometry::default(),
            channel_policy: ChannelPolicy::SingleChannel,
            channel_map_file: None,
            path_loss: PathLossParams::default(),
            noise_floor_dbm: ChannelModel::DEFAULT_NOISE_FLOOR_DBM,
            capture_db: None,
            sim: SimConfig::default(),
        }
    }
}

/// Every accepted key, in manifest order.
pub const KEYS: &[&str] = &[
    "scenario",
    "protocols",
    "iterations",
    "seed",
    "duration",
    "out",
    "stations",
    "aps",
    "delta_x",
    "delta",
    "radius",
    "ideal",
    "control",
    "floors",
    "rooms_x",
    "rooms_y",
    "room_side",
    "floor_height",
    "channel_policy",
    "channel_map_file",
    "carrier_frequency",
    "wall_loss",
    "floor_loss",
    "breakpoint",
    "noise_floor_dbm",
    "capture_db",
    "tx_power",
    "cca_threshold",
    "detect_threshold",
    "payload",
    "phy_rate",
    "ack_rate",
    "preamble",
    "ack_preamble",
    "mac_header",
    "ack_bytes",
    "cw_min",
    "cw_max",
    "retry_limit",
    "slot",
    "difs",
    "sifs",
    "stickiness",
    "strict_ack",
    "fair_share",
    "countdown",
];

/// Where a setting came from, for diagnostics.
#[derive(Debug, Clone)]
struct Origin {
    source: String,
    line: usize,
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_list<T>(
    v: &str,
    item: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Vec<T>, String> {
    let items = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(items)
}

fn pow2(v: &str) -> std::result::Result<u32, String> {
    let n: u32 = parse_num(v)?;
    if n < 2 || !n.is_power_of_two() {
        return Err(format!("must be a power of two >= 2, got {n}"));
    }
    Ok(n)
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if !(x > 0.0) || !x.is_finite() {
        return Err(format!("must be positive, got {v}"));
    }
    Ok(x)
}

fn parse_policy(v: &str) -> std::result::Result<ChannelPolicy, String> {
    match v {
        "single" => Ok(ChannelPolicy::SingleChannel),
        "eight_ab" => Ok(ChannelPolicy::EightTypeAB),
        "twenty" => Ok(ChannelPolicy::TwentyGrid),
        // filled in from channel_map_file once everything is read
        "explicit" | "file" => Ok(ChannelPolicy::Explicit(Default::default())),
        _ => match v.strip_prefix("random") {
            Some(c) => Ok(ChannelPolicy::RandomFrom(parse_num(c)?)),
            None => Err(format!(
                "expected single, eight_ab, twenty, randomC or explicit, got `{v}`"
            )),
        },
    }
}

fn apply(spec: &mut RunSpec, key: &str, v: &str) -> std::result::Result<(), String> {
    let sim = &mut spec.sim;
    match key {
        "scenario" => {
            spec.scenario = ScenarioKind::parse(v).ok_or_else(|| {
                format!("expected single_ap, scenario_a, scenario_b or hew, got `{v}`")
            })?
        }
        "protocols" => {
            spec.protocols = parse_list(v, |p| {
                ProtocolKind::parse(p).ok_or_else(|| format!("unknown protocol `{p}`"))
            })?
        }
        "iterations" => {
            spec.iterations = parse_num(v)?;
            if spec.iterations == 0 {
                return Err("at least one iteration is required".into());
            }
        }
        "seed" => spec.base_seed = parse_num(v)?,
        "duration" => spec.duration_s = positive(v)?,
        "out" => spec.output_dir = PathBuf::from(v),
        "stations" => {
            spec.stations = parse_list(v, |s| match parse_num::<usize>(s)? {
                0 => Err("station counts must be at least 1".into()),
                n => Ok(n),
            })?
        }
        "aps" => {
            spec.aps = parse_num(v)?;
            if spec.aps == 0 {
                return Err("at least one AP is required".into());
            }
        }
        "delta_x" => spec.delta_x_m = positive(v)?,
        "delta" => spec.delta_m = positive(v)?,
        "radius" => spec.radius_m = positive(v)?,
        "ideal" => spec.ideal = parse_bool(v)?,
        "control" => spec.control = parse_bool(v)?,
        "floors" => spec.building.floors = parse_num(v)?,
        "rooms_x" => spec.building.rooms_x = parse_num(v)?,
        "rooms_y" => spec.building.rooms_y = parse_num(v)?,
        "room_side" => spec.building.room_side_m = positive(v)?,
        "floor_height" => spec.building.floor_height_m = positive(v)?,
        "channel_policy" => spec.channel_policy = parse_policy(v)?,
        "channel_map_file" => {
            spec.channel_map_file = match v {
                "" | "none" => None,
                p => Some(PathBuf::from(p)),
            }
        }
        "carrier_frequency" => spec.path_loss.carrier_frequency_hz = positive(v)?,
        "wall_loss" => spec.path_loss.per_wall_db = parse_num(v)?,
        "floor_loss" => spec.path_loss.per_floor_db = parse_num(v)?,
        "breakpoint" => spec.path_loss.breakpoint_m = positive(v)?,
        "noise_floor_dbm" => spec.noise_floor_dbm = parse_num(v)?,
        "capture_db" => {
            spec.capture_db = match v {
                "none" | "off" => None,
                x => Some(parse_num(x)?),
            }
        }
        "tx_power" => sim.thresholds.tx_power_dbm = parse_num(v)?,
        "cca_threshold" => sim.thresholds.cca_energy_dbm = parse_num(v)?,
        "detect_threshold" => sim.thresholds.frame_detect_dbm = parse_num(v)?,
        "payload" => {
            sim.payload_bytes = parse_num(v)?;
            if sim.payload_bytes == 0 {
                return Err("payload must be at least one byte".into());
            }
        }
        "phy_rate" => sim.phy_rate_mbps = positive(v)?,
        "ack_rate" => sim.ack_rate_mbps = positive(v)?,
        "preamble" => sim.preamble_us = parse_num(v)?,
        "ack_preamble" => sim.ack_preamble_us = parse_num(v)?,
        "mac_header" => sim.mac_header_bytes = parse_num(v)?,
        "ack_bytes" => sim.ack_bytes = parse_num(v)?,
        "cw_min" => sim.mac.cw_min = pow2(v)?,
        "cw_max" => sim.mac.cw_max = pow2(v)?,
        "retry_limit" => sim.mac.retry_limit = parse_num(v)?,
        "slot" => {
            sim.mac.slot_us = parse_num(v)?;
            if sim.mac.slot_us == 0 {
                return Err("slot must be at least 1 us".into());
            }
        }
        "difs" => sim.mac.difs_us = parse_num(v)?,
        "sifs" => sim.mac.sifs_us = parse_num(v)?,
        "stickiness" => sim.mac.default_stickiness = parse_num(v)?,
        "strict_ack" => sim.strict_ack = parse_bool(v)?,
        "fair_share" => sim.fair_share = parse_bool(v)?,
        "countdown" => {
            sim.countdown = CountdownRule::parse(v)
                .ok_or_else(|| format!("expected virtual_slot or freeze, got `{v}`"))?
        }
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Splits specification text into `(key, value, line)` entries. Blank lines
/// and `#` comments are skipped.
fn read_entries(source: &str, text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Spec {
            source_name: source.to_string(),
            line: i + 1,
            key: line.to_string(),
            message: "expected `key = value`".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Resolves a specification from optional file text (with a name used in
/// diagnostics) and `key=value` overrides that take precedence over it.
///
/// ```
/// use ecasim::cli::{parse_spec, ScenarioKind};
/// let spec = parse_spec(Some(("run.spec", "scenario = hew\nprotocols = dcf, eca")), &[]).unwrap();
/// assert_eq!(spec.scenario, ScenarioKind::Hew);
/// assert_eq!(spec.protocols.len(), 2);
/// assert!(parse_spec(Some(("run.spec", "cw_min = 15")), &[]).is_err());
/// ```
pub fn parse_spec(file: Option<(&str, &str)>, overrides: &[(String, String)]) -> Result<RunSpec> {
    let mut entries: Vec<(String, String, Origin)> = Vec::new();
    if let Some((name, text)) = file {
        let mut seen = BTreeMap::new();
        for (k, v, line) in read_entries(name, text)? {
            if let Some(first) = seen.insert(k.clone(), line) {
                return Err(Error::Spec {
                    source_name: name.to_string(),
                    line,
                    key: k,
                    message: format!("already set on line {first}"),
                });
            }
            let origin = Origin {
                source: name.to_string(),
                line,
            };
            entries.push((k, v, origin));
        }
    }
    for (i, (k, v)) in overrides.iter().enumerate() {
        let origin = Origin {
            source: "command line".into(),
            line: i + 1,
        };
        entries.push((k.trim().to_string(), v.trim().to_string(), origin));
    }

    let mut spec = RunSpec::default();
    let mut origins: BTreeMap<String, Origin> = BTreeMap::new();
    for (k, v, origin) in entries {
        if let Err(message) = apply(&mut spec, &k, &v) {
            return Err(Error::Spec {
                source_name: origin.source,
                line: origin.line,
                key: k,
                message,
            });
        }
        origins.insert(k, origin);
    }
    resolve(spec, &origins)
}

/// Reads a specification file and applies overrides.
pub fn parse_spec_file(path: &Path, overrides: &[(String, String)]) -> Result<RunSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(Some((&path.display().to_string(), &text)), overrides)
}

/// Cross-key checks, attributed to the most specific key that was set.
fn resolve(mut spec: RunSpec, origins: &BTreeMap<String, Origin>) -> Result<RunSpec> {
    let blame = |keys: &[&str], message: String| -> Error {
        let key = keys
            .iter()
            .find(|k| origins.contains_key(**k))
            .unwrap_or(&keys[0]);
        let (source_name, line) = origins
            .get(*key)
            .map_or(("defaults".to_string(), 0), |o| (o.source.clone(), o.line));
        Error::Spec {
            source_name,
            line,
            key: key.to_string(),
            message,
        }
    };
    let msg = |e: Error| match e {
        Error::Config(m) | Error::Domain(m) => m,
        other => other.to_string(),
    };

    spec.sim.mac.validate().map_err(|e| {
        blame(
            &["cw_max", "cw_min", "retry_limit", "slot", "difs", "sifs"],
            msg(e),
        )
    })?;
    for p in &spec.protocols {
        p.validate(&spec.sim.mac)
            .map_err(|e| blame(&["protocols"], msg(e)))?;
    }
    spec.sim
        .thresholds
        .validate()
        .map_err(|e| blame(&["detect_threshold", "cca_threshold", "tx_power"], msg(e)))?;
    spec.path_loss.validate().map_err(|e| {
        blame(
            &["wall_loss", "floor_loss", "carrier_frequency", "breakpoint"],
            msg(e),
        )
    })?;
    if spec.scenario == ScenarioKind::Hew {
        spec.building.validate().map_err(|e| {
            blame(
                &["floors", "rooms_x", "rooms_y", "room_side", "floor_height"],
                msg(e),
            )
        })?;
    }
    if let Some(c) = spec.capture_db {
        if !c.is_finite() {
            return Err(blame(&["capture_db"], "must be finite".into()));
        }
    }
    if let ChannelPolicy::Explicit(map) = &mut spec.channel_policy {
        let path = spec.channel_map_file.as_ref().ok_or_else(|| {
            blame(
                &["channel_policy"],
                "an explicit policy needs channel_map_file".into(),
            )
        })?;
        let text = fs::read_to_string(path)
            .map_err(|e| blame(&["channel_map_file"], format!("{}: {e}", path.display())))?;
        *map = parse_channel_map(&text).map_err(|e| blame(&["channel_map_file"], msg(e)))?;
    }
    Ok(spec)
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

/// The specification as `key = value` text covering every key, so that
/// parsing it yields the same [`RunSpec`].
pub fn to_spec_text(spec: &RunSpec) -> String {
    let mut s = String::new();
    let sim = &spec.sim;
    let join = |v: Vec<String>| v.join(", ");
    for &key in KEYS {
        let value = match key {
            "scenario" => spec.scenario.name().to_string(),
            "protocols" => join(spec.protocols.iter().map(|p| p.name()).collect()),
            "iterations" => spec.iterations.to_string(),
            "seed" => spec.base_seed.to_string(),
            "duration" => fmt_f(spec.duration_s),
            "out" => spec.output_dir.display().to_string(),
            "stations" => join(spec.stations.iter().map(|n| n.to_string()).collect()),
            "aps" => spec.aps.to_string(),
            "delta_x" => fmt_f(spec.delta_x_m),
            "delta" => fmt_f(spec.delta_m),
            "radius" => fmt_f(spec.radius_m),
            "ideal" => spec.ideal.to_string(),
            "control" => spec.control.to_string(),
            "floors" => spec.building.floors.to_string(),
            "rooms_x" => spec.building.rooms_x.to_string(),
            "rooms_y" => spec.building.rooms_y.to_string(),
            "room_side" => fmt_f(spec.building.room_side_m),
            "floor_height" => fmt_f(spec.building.floor_height_m),
            "channel_policy" => spec.channel_policy.name(),
            "channel_map_file" => spec
                .channel_map_file
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
            "carrier_frequency" => fmt_f(spec.path_loss.carrier_frequency_hz),
            "wall_loss" => fmt_f(spec.path_loss.per_wall_db),
            "floor_loss" => fmt_f(spec.path_loss.per_floor_db),
            "breakpoint" => fmt_f(spec.path_loss.breakpoint_m),
            "noise_floor_dbm" => fmt_f(spec.noise_floor_dbm),
            "capture_db" => spec.capture_db.map_or("none".into(), fmt_f),
            "tx_power" => fmt_f(sim.thresholds.tx_power_dbm),
            "cca_threshold" => fmt_f(sim.thresholds.cca_energy_dbm),
            "detect_threshold" => fmt_f(sim.thresholds.frame_detect_dbm),
            "payload" => sim.payload_bytes.to_string(),
            "phy_rate" => fmt_f(sim.phy_rate_mbps),
            "ack_rate" => fmt_f(sim.ack_rate_mbps),
            "preamble" => sim.preamble_us.to_string(),
            "ack_preamble" => sim.ack_preamble_us.to_string(),
            "mac_header" => sim.mac_header_bytes.to_string(),
            "ack_bytes" => sim.ack_bytes.to_string(),
            "cw_min" => sim.mac.cw_min.to_string(),
            "cw_max" => sim.mac.cw_max.to_string(),
            "retry_limit" => sim.mac.retry_limit.to_string(),
            "slot" => sim.mac.slot_us.to_string(),
            "difs" => sim.mac.difs_us.to_string(),
            "sifs" => sim.mac.sifs_us.to_string(),
            "stickiness" => sim.mac.default_stickiness.to_string(),
            "strict_ack" => sim.strict_ack.to_string(),
            "fair_share" => sim.fair_share.to_string(),
            "countdown" => sim.countdown.name().to_string(),
            other => unreachable!("key {other} missing from the manifest writer"),
        };
        let _ = writeln!(s, "{key} = {value}");
    }
    s
}

/// The scenario of one run, with the specification's propagation settings
/// and channel policy applied.
pub fn build_scenario(spec: &RunSpec, stations: usize, seed: u64) -> Result<Scenario> {
    let mut s = match spec.scenario {
        ScenarioKind::SingleAp => gen_single_ap(stations, spec.radius_m, spec.ideal)?,
        ScenarioKind::ScenarioA => gen_scenario_a(
            spec.aps,
            stations,
            spec.delta_x_m,
            spec.delta_m,
            spec.control,
        )?,
        ScenarioKind::ScenarioB => {
            gen_scenario_b(spec.aps, stations, spec.delta_x_m, spec.delta_m, seed)?
        }
        ScenarioKind::Hew => gen_hew_building(spec.building, stations, seed)?,
    };
    s.topology = allocate_channels(s.topology, &spec.channel_policy, seed)?;
    if let ChannelModel::LogDistance {
        params,
        noise_floor_dbm,
        capture_threshold_db,
    } = &mut s.channel
    {
        *params = spec.path_loss;
        *noise_floor_dbm = spec.noise_floor_dbm;
        *capture_threshold_db = spec.capture_db;
    }
    Ok(s)
}

/// One cell of the run matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub stations: usize,
    pub protocol: ProtocolKind,
    pub iteration: u32,
    pub seed: u64,
}

impl Job {
    pub fn raw_file_name(&self, scenario: ScenarioKind) -> String {
        format!(
            "{}_n{}_{}_it{}.csv",
            scenario.name(),
            self.stations,
            self.protocol.name(),
            self.iteration
        )
    }
}

/// Station counts, then protocols, then iterations.
pub fn jobs(spec: &RunSpec) -> Vec<Job> {
    let mut out = Vec::new();
    for &stations in &spec.stations {
        for &protocol in &spec.protocols {
            for iteration in 0..spec.iterations {
                out.push(Job {
                    stations,
                    protocol,
                    iteration,
                    seed: spec.base_seed.wrapping_add(iteration as u64),
                });
            }
        }
    }
    out
}

pub fn run_job(spec: &RunSpec, job: &Job) -> Result<RunResult> {
    let scenario = build_scenario(spec, job.stations, job.seed)?;
    let config = SimConfig {
        duration_s: spec.duration_s,
        seed: job.seed,
        protocol: job.protocol,
        channel: scenario.channel,
        ..spec.sim.clone()
    };
    engine::run(&scenario.topology, &config)
}

/// Aggregated metrics of all iterations of one (station count, protocol)
/// cell under one grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    pub stations: usize,
    pub protocol: ProtocolKind,
    pub grouping: Grouping,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    Partial,
}

#[derive(Debug, Clone)]
pub struct ExecReport {
    pub status: Status,
    pub runs: usize,
    pub written: Vec<PathBuf>,
    pub failed: Vec<(PathBuf, String)>,
}

const RAW_HEADER: [&str; 11] = [
    "node_id",
    "role",
    "wlan",
    "floor",
    "channel",
    "successes [tx]",
    "failures [tx]",
    "drops [frames]",
    "attempts [tx]",
    "payload_bytes [B]",
    "throughput [Mbit/s]",
];

const AGG_HEADER: [&str; 13] = [
    "stations_per_ap",
    "protocol",
    "group",
    "runs",
    "throughput_mean [Mbit/s]",
    "throughput_std [Mbit/s]",
    "failure_fraction_mean [ratio]",
    "failure_fraction_std [ratio]",
    "attempts_mean [tx]",
    "attempts_std [tx]",
    "jfi_mean [ratio]",
    "jfi_std [ratio]",
    "member_stations",
];

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt6(x: Option<f64>) -> String {
    x.map(f6).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_raw(path: &Path, run: &RunResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(RAW_HEADER).map_err(|e| csv_err(path, e))?;
    for n in &run.nodes {
        let role = match n.role {
            Role::Ap => "ap",
            Role::Station => "station",
        };
        w.write_record([
            n.id.to_string(),
            role.to_string(),
            n.wlan.to_string(),
            n.floor.map(|f| f.to_string()).unwrap_or_default(),
            n.channel.to_string(),
            n.stats.successes.to_string(),
            n.stats.failures.to_string(),
            n.stats.drops.to_string(),
            n.stats.attempts.to_string(),
            n.stats.delivered_bytes.to_string(),
            f6(metrics::throughput_mbps(&n.stats, run.sim_seconds)),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_aggregate(path: &Path, cells: &[&CellAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(AGG_HEADER).map_err(|e| csv_err(path, e))?;
    for c in cells {
        for r in &c.rows {
            w.write_record([
                c.stations.to_string(),
                c.protocol.name(),
                r.key.to_string(),
                r.runs.to_string(),
                f6(r.throughput_mbps.mean),
                opt6(r.throughput_mbps.std),
                f6(r.failure_fraction.mean),
                opt6(r.failure_fraction.std),
                f6(r.attempts.mean),
                opt6(r.attempts.std),
                f6(r.jfi.mean),
                opt6(r.jfi.std),
                r.stations.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn groupings(spec: &RunSpec) -> Vec<Grouping> {
    Grouping::ALL
        .into_iter()
        .filter(|g| *g != Grouping::PerFloor || spec.scenario == ScenarioKind::Hew)
        .collect()
}

/// Aggregates finished runs per (station count, protocol) cell. `results`
/// must be in [`jobs`] order.
pub fn aggregate_cells(spec: &RunSpec, results: &[RunResult]) -> Result<Vec<CellAggregate>> {
    let all = jobs(spec);
    assert_eq!(all.len(), results.len(), "one result per job");
    let per_cell = spec.iterations as usize;
    let mut cells = Vec::new();
    for (chunk_jobs, chunk) in all.chunks(per_cell).zip(results.chunks(per_cell)) {
        for g in groupings(spec) {
            cells.push(CellAggregate {
                stations: chunk_jobs[0].stations,
                protocol: chunk_jobs[0].protocol,
                grouping: g,
                rows: metrics::summarize(chunk, g)?,
            });
        }
    }
    Ok(cells)
}

/// Runs the whole matrix and writes its outputs under `spec.output_dir`.
///
/// Runs execute in parallel; files are written afterwards in job order so
/// outputs do not depend on scheduling. A configuration error aborts before
/// anything is written. Write failures do not stop the remaining files; the
/// manifest then records the run as partial and an error is returned.
pub fn execute(spec: &RunSpec) -> Result<ExecReport> {
    let jobs = jobs(spec);
    // fail fast on configuration problems
    build_scenario(spec, jobs[0].stations, jobs[0].seed)?;
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|j| run_job(spec, j))
        .collect::<Result<_>>()?;
    let cells = aggregate_cells(spec, &results)?;

    let out = &spec.output_dir;
    let mut report = ExecReport {
        status: Status::Complete,
        runs: results.len(),
        written: Vec::new(),
        failed: Vec::new(),
    };
    let mut record = |path: PathBuf, r: Result<()>| match r {
        Ok(()) => report.written.push(path),
        Err(e) => report.failed.push((path, e.to_string())),
    };

    let raw_dir = out.join("raw");
    let mkdir = fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e));
    let mkdir_ok = mkdir.is_ok();
    if let Err(e) = mkdir {
        record(raw_dir.clone(), Err(e));
    }
    if mkdir_ok {
        for (job, run) in jobs.iter().zip(&results) {
            let path = raw_dir.join(job.raw_file_name(spec.scenario));
            let r = write_raw(&path, run);
            record(path, r);
        }
        for g in groupings(spec) {
            let path = out.join(format!("aggregate_{}.csv", g.name()));
            let selected: Vec<&CellAggregate> = cells.iter().filter(|c| c.grouping == g).collect();
            let r = write_aggregate(&path, &selected);
            record(path, r);
        }
        match emit_plotdata(&cells, &out.join("plot")) {
            Ok(files) => report.written.extend(files),
            Err(e) => report.failed.push((out.join("plot"), e.to_string())),
        }
    }

    if !report.failed.is_empty() {
        report.status = Status::Partial;
    }
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, spec, &jobs, &report)?;
    report.written.push(manifest);
    if report.status == Status::Partial {
        let (path, why) = &report.failed[0];
        return Err(Error::io(
            path,
            std::io::Error::other(format!(
                "{why} ({} file(s) not written, see manifest)",
                report.failed.len()
            )),
        ));
    }
    Ok(report)
}

fn write_manifest(path: &Path, spec: &RunSpec, jobs: &[Job], report: &ExecReport) -> Result<()> {
    let mut s = String::new();
    let status = match report.status {
        Status::Complete => "complete",
        Status::Partial => "partial",
    };
    let _ = writeln!(
        s,
        "# ecasim manifest; rerun with `ecasim --spec manifest.txt`"
    );
    let _ = writeln!(s, "# status: {status}");
    for (p, why) in &report.failed {
        let _ = writeln!(s, "# not written: {} ({why})", p.display());
    }
    s.push_str(&to_spec_text(spec));
    let _ = writeln!(s, "# runs: stations protocol iteration seed file");
    for j in jobs {
        let _ = writeln!(
            s,
            "# run {} {} {} {} raw/{}",
            j.stations,
            j.protocol.name(),
            j.iteration,
            j.seed,
            j.raw_file_name(spec.scenario)
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes tab-separated series for plotting into `dir`:
///
/// * `throughput_vs_n_<protocol>.tsv`, `failures_vs_n_<protocol>.tsv`
/// * `per_station_<protocol>_n<N>.tsv`
/// * `per_floor_<protocol>_n<N>.tsv` (throughput, failures, attempts)
/// * `jfi_n<N>.tsv`, one row per protocol
///
/// Nothing is written, and `dir` is not created, when `aggregates` is
/// empty. Returns the files written.
pub fn emit_plotdata(aggregates: &[CellAggregate], dir: &Path) -> Result<Vec<PathBuf>> {
    if aggregates.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: String, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let path = dir.join(name);
        write_tsv(&path, header, &rows)?;
        written.push(path);
        Ok(())
    };
    let ms = |m: &metrics::MeanStd| [f6(m.mean), opt6(m.std)];

    let mut protocols: Vec<ProtocolKind> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for c in aggregates {
        if !protocols.contains(&c.protocol) {
            protocols.push(c.protocol);
        }
        if !counts.contains(&c.stations) {
            counts.push(c.stations);
        }
    }

    for &p in &protocols {
        let overall: Vec<&CellAggregate> = aggregates
            .iter()
            .filter(|c| c.protocol == p && c.grouping == Grouping::Overall)
            .collect();
        if overall.is_empty() {
            continue;
        }
        let series = |f: &dyn Fn(&SummaryRow) -> [String; 2]| -> Vec<Vec<String>> {
            overall
                .iter()
                .filter_map(|c| c.rows.first().map(|r| (c.stations, r)))
                .map(|(n, r)| {
                    let [m, s] = f(r);
                    vec![n.to_string(), m, s]
                })
                .collect()
        };
        emit(
            format!("throughput_vs_n_{}.tsv", p.name()),
            &[
                "stations_per_ap",
                "throughput_mean_mbps",
                "throughput_std_mbps",
            ],
            series(&|r| ms(&r.throughput_mbps)),
        )?;
        emit(
            format!("failures_vs_n_{}.tsv", p.name()),
            &[
                "stations_per_ap",
                "failure_fraction_mean",
                "failure_fraction_std",
            ],
            series(&|r| ms(&r.failure_fraction)),
        )?;
    }

    for c in aggregates {
        let p = c.protocol.name();
        match c.grouping {
            Grouping::PerStation => emit(
                format!("per_station_{p}_n{}.tsv", c.stations),
                &["station", "throughput_mean_mbps", "throughput_std_mbps"],
                c.rows
                    .iter()
                    .map(|r| {
                        let [m, s] = ms(&r.throughput_mbps);
                        vec![r.key.to_string(), m, s]
                    })
                    .collect(),
            )?,
            Grouping::PerFloor => emit(
                format!("per_floor_{p}_n{}.tsv", c.stations),
                &[
                    "floor",
                    "throughput_mean_mbps",
                    "failure_fraction_mean",
                    "attempts_mean",
                ],
                c.rows
                    .iter()
                    .map(|r| {
                        vec![
                            r.key.to_string(),
                            f6(r.throughput_mbps.mean),
                            f6(r.failure_fraction.mean),
                            f6(r.attempts.mean),
                        ]
                    })
                    .collect(),
            )?,
            Grouping::PerWlan | Grouping::Overall => {}
        }
    }

    for &n in &counts {
        let mut rows = Vec::new();
        for &p in &protocols {
            let pick = |g: Grouping| {
                aggregates
                    .iter()
                    .find(|c| c.stations == n && c.protocol == p && c.grouping == g)
            };
            let overall = pick(Grouping::Overall).and_then(|c| c.rows.first());
            let wlan_mean = pick(Grouping::PerWlan).map(|c| {
                let v: Vec<f64> = c.rows.iter().map(|r| r.jfi.mean).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            });
            if overall.is_none() && wlan_mean.is_none() {
                continue;
            }
            rows.push(vec![
                p.name(),
                opt6(overall.map(|r| r.jfi.mean)),
                opt6(wlan_mean),
            ]);
        }
        if !rows.is_empty() {
            emit(
                format!("jfi_n{n}.tsv"),
                &["protocol", "jfi_overall", "jfi_per_wlan_mean"],
                rows,
            )?;
        }
    }
    Ok(written)
}
