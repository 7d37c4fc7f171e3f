//! Throughput, failure fraction, attempts and Jain's fairness index, per
//! station or aggregated per WLAN, per floor, or over the whole run.
//!
//! Throughput counts MAC payload bytes only.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::AddAssign;

use crate::engine::{NodeResult, RunResult};
use crate::scenarios::Role;
use crate::{Error, NodeId, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PerNodeStats {
    pub successes: u64,
    pub failures: u64,
    /// Frames discarded at the retry limit; each is also one failure.
    pub drops: u64,
    pub attempts: u64,
    pub delivered_bytes: u64,
}

impl AddAssign for PerNodeStats {
    fn add_assign(&mut self, rhs: Self) {
        self.successes += rhs.successes;
        self.failures += rhs.failures;
        self.drops += rhs.drops;
        self.attempts += rhs.attempts;
        self.delivered_bytes += rhs.delivered_bytes;
    }
}

pub fn throughput_mbps(stats: &PerNodeStats, sim_seconds: f64) -> f64 {
    assert!(sim_seconds > 0.0, "throughput over a non-positive duration");
    stats.delivered_bytes as f64 * 8.0 / (sim_seconds * 1e6)
}

/// `failures / attempts`, or 0 when nothing was attempted.
pub fn failure_fraction(stats: &PerNodeStats) -> f64 {
    if stats.attempts == 0 {
        0.0
    } else {
        stats.failures as f64 / stats.attempts as f64
    }
}

/// Jain's fairness index `(sum x)^2 / (n sum x^2)`. An empty or all-zero
/// input is perfectly fair.
pub fn jfi(values: &[f64]) -> f64 {
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|v| v * v).sum();
    if values.is_empty() || sq == 0.0 {
        return 1.0;
    }
    sum * sum / (values.len() as f64 * sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Grouping {
    PerStation,
    PerWlan,
    PerFloor,
    Overall,
}

impl Grouping {
    pub const ALL: [Grouping; 4] = [
        Grouping::PerStation,
        Grouping::PerWlan,
        Grouping::PerFloor,
        Grouping::Overall,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Grouping::PerStation => "per_station",
            Grouping::PerWlan => "per_wlan",
            Grouping::PerFloor => "per_floor",
            Grouping::Overall => "overall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKey {
    Station(NodeId),
    Wlan(usize),
    Floor(u32),
    Overall,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Station(id) => write!(f, "station-{id}"),
            GroupKey::Wlan(w) => write!(f, "wlan-{w}"),
            GroupKey::Floor(z) => write!(f, "floor-{z}"),
            GroupKey::Overall => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub key: GroupKey,
    pub stations: usize,
    pub totals: PerNodeStats,
    pub throughput_mbps: f64,
    pub failure_fraction: f64,
    pub attempts: u64,
    /// Fairness over the member stations' throughputs.
    pub jfi: f64,
}

/// Aggregates the stations of one run. Rows are ordered by key.
///
/// Asking for per-floor rows from a run whose stations carry no floor is a
/// contract violation and yields an error.
pub fn aggregate(run: &RunResult, grouping: Grouping) -> Result<Vec<GroupRow>> {
    let mut groups: BTreeMap<GroupKey, Vec<&NodeResult>> = BTreeMap::new();
    for n in run.nodes.iter().filter(|n| n.role == Role::Station) {
        let key = match grouping {
            Grouping::PerStation => GroupKey::Station(n.id),
            Grouping::PerWlan => GroupKey::Wlan(n.wlan),
            Grouping::PerFloor => GroupKey::Floor(n.floor.ok_or_else(|| {
                Error::config(format!(
                    "station {} has no floor; per-floor grouping undefined",
                    n.id
                ))
            })?),
            Grouping::Overall => GroupKey::Overall,
        };
        groups.entry(key).or_default().push(n);
    }
    if grouping == Grouping::Overall && groups.is_empty() {
        groups.insert(GroupKey::Overall, Vec::new());
    }
    Ok(groups
        .into_iter()
        .map(|(key, members)| {
            let mut totals = PerNodeStats::default();
            let mut tputs = Vec::with_capacity(members.len());
            for m in &members {
                totals += m.stats;
                tputs.push(throughput_mbps(&m.stats, run.sim_seconds));
            }
            GroupRow {
                key,
                stations: members.len(),
                totals,
                throughput_mbps: throughput_mbps(&totals, run.sim_seconds),
                failure_fraction: failure_fraction(&totals),
                attempts: totals.attempts,
                jfi: jfi(&tputs),
            }
        })
        .collect())
}

/// Sample mean and standard deviation; the deviation is absent for fewer
/// than two samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub key: GroupKey,
    pub runs: usize,
    /// Member stations, taken from the largest instance of the group.
    pub stations: usize,
    pub throughput_mbps: MeanStd,
    pub failure_fraction: MeanStd,
    pub attempts: MeanStd,
    pub jfi: MeanStd,
}

/// Mean and deviation of each group's metrics across independent runs.
/// A group missing from some run contributes only the runs it appears in.
pub fn summarize(runs: &[RunResult], grouping: Grouping) -> Result<Vec<SummaryRow>> {
    let mut acc: BTreeMap<GroupKey, (usize, [Vec<f64>; 4])> = BTreeMap::new();
    for run in runs {
        for row in aggregate(run, grouping)? {
            let (members, e) = acc.entry(row.key).or_default();
            *members = (*members).max(row.stations);
            e[0].push(row.throughput_mbps);
            e[1].push(row.failure_fraction);
            e[2].push(row.attempts as f64);
            e[3].push(row.jfi);
        }
    }
    Ok(acc
        .into_iter()
        .map(|(key, (stations, v))| SummaryRow {
            key,
            runs: v[0].len(),
            stations,
            throughput_mbps: mean_std(&v[0]),
            failure_fraction: mean_std(&v[1]),
            attempts: mean_std(&v[2]),
            jfi: mean_std(&v[3]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, SimConfig};
    use crate::mac::ProtocolKind;
    use crate::scenarios::{gen_hew_building, gen_scenario_b, gen_single_ap, BuildingGeometry};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn stats(successes: u64, failures: u64, bytes: u64) -> PerNodeStats {
        PerNodeStats {
            successes,
            failures,
            drops: 0,
            attempts: successes + failures,
            delivered_bytes: bytes,
        }
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput_mbps(&PerNodeStats::default(), 25.0), 0.0);
        assert_relative_eq!(throughput_mbps(&stats(1, 0, 1_000_000), 1.0), 8.0);
        assert_relative_eq!(
            throughput_mbps(&stats(1000, 0, 1000 * 1470), 25.0),
            0.4704,
            epsilon = 1e-12
        );
    }

    #[test]
    fn failure_fraction_examples() {
        assert_eq!(failure_fraction(&stats(100, 0, 0)), 0.0);
        assert_eq!(failure_fraction(&stats(50, 50, 0)), 0.5);
        assert_eq!(failure_fraction(&PerNodeStats::default()), 0.0);
    }

    #[test]
    fn jfi_examples() {
        assert_relative_eq!(jfi(&[5.0, 5.0, 5.0, 5.0]), 1.0);
        assert_relative_eq!(jfi(&[1.0, 0.0, 0.0, 0.0]), 0.25);
        assert_relative_eq!(jfi(&[3.0, 1.0]), 0.8);
        assert_eq!(jfi(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn mean_std_examples() {
        let m = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_relative_eq!(m.mean, 5.0);
        assert_relative_eq!(m.std.unwrap(), (32.0f64 / 7.0).sqrt());
        assert_eq!(mean_std(&[3.0]).std, None);
    }

    fn short_run(s: &crate::scenarios::Scenario, seed: u64) -> RunResult {
        let cfg = SimConfig {
            duration_s: 0.2,
            seed,
            protocol: ProtocolKind::Dcf,
            channel: s.channel,
            ..SimConfig::default()
        };
        run(&s.topology, &cfg).unwrap()
    }

    #[test]
    fn single_wlan_row_is_the_station_sum() {
        let s = gen_single_ap(4, 5.0, true).unwrap();
        let r = short_run(&s, 3);
        let rows = aggregate(&r, Grouping::PerWlan).unwrap();
        assert_eq!(rows.len(), 1);
        let mut sum = PerNodeStats::default();
        r.stations().for_each(|n| sum += n.stats);
        assert_eq!(rows[0].totals, sum);
        assert_eq!(rows[0].stations, 4);
    }

    #[test]
    fn default_building_has_five_floor_rows() {
        let s = gen_hew_building(BuildingGeometry::default(), 1, 2).unwrap();
        let r = short_run(&s, 2);
        let rows = aggregate(&r, Grouping::PerFloor).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|row| row.stations == 20));
    }

    #[test]
    fn floorless_runs_reject_per_floor_grouping() {
        let s = gen_single_ap(2, 5.0, true).unwrap();
        let r = short_run(&s, 1);
        assert!(matches!(
            aggregate(&r, Grouping::PerFloor),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn averaging_identical_runs_is_idempotent() {
        let s = gen_scenario_b(2, 3, 15.0, 5.0, 4).unwrap();
        let r = short_run(&s, 4);
        for g in [Grouping::PerStation, Grouping::PerWlan, Grouping::Overall] {
            let single = aggregate(&r, g).unwrap();
            let multi = summarize(&[r.clone(), r.clone(), r.clone()], g).unwrap();
            assert_eq!(single.len(), multi.len());
            for (a, b) in single.iter().zip(&multi) {
                assert_eq!(a.key, b.key);
                assert_relative_eq!(a.throughput_mbps, b.throughput_mbps.mean);
                assert_relative_eq!(a.failure_fraction, b.failure_fraction.mean);
                assert_relative_eq!(a.jfi, b.jfi.mean);
                assert_relative_eq!(b.throughput_mbps.std.unwrap(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn groupings_partition_the_stations() {
        let s = gen_hew_building(
            BuildingGeometry {
                floors: 2,
                rooms_x: 2,
                rooms_y: 1,
                ..BuildingGeometry::default()
            },
            3,
            5,
        )
        .unwrap();
        let r = short_run(&s, 5);
        let total = aggregate(&r, Grouping::Overall).unwrap()[0].totals;
        for g in [Grouping::PerStation, Grouping::PerWlan, Grouping::PerFloor] {
            let mut sum = PerNodeStats::default();
            aggregate(&r, g)
                .unwrap()
                .iter()
                .for_each(|row| sum += row.totals);
            assert_eq!(sum, total, "{g:?}");
        }
    }

    proptest! {
        #[test]
        fn jfi_bounds_and_scale_invariance(
            v in prop::collection::vec(0.0f64..1e3, 1..40),
            c in 1e-3f64..1e3,
        ) {
            let j = jfi(&v);
            let n = v.len() as f64;
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((jfi(&scaled) - j).abs() < 1e-9);
        }

        #[test]
        fn failure_fraction_is_a_ratio(s in 0u64..10_000, f in 0u64..10_000) {
            let ff = failure_fraction(&stats(s, f, 0));
            prop_assert!((0.0..=1.0).contains(&ff));
        }
    }
}
