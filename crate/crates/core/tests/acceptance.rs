//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecasim::channel::{path_loss, ObstacleCount, PathLossParams};
use ecasim::cli::{execute, parse_spec, parse_spec_file};
use ecasim::engine::{run, RunResult, SimConfig};
use ecasim::mac::{
    after_failure, after_success, contention_window, deterministic_backoff, gamma, on_busy_freeze,
    on_busy_slot, on_idle_slot, on_idle_slots, sr_evaluate, stage_for_backoff, BackoffState,
    FailureOutcome, MacParams, ProtocolKind, SrState, SrVariant,
};
use ecasim::metrics::{aggregate, throughput_mbps, Grouping};
use ecasim::scenarios::{
    allocate_channels, gen_hew_building, gen_scenario_a, gen_scenario_b, gen_single_ap,
    BuildingGeometry, ChannelPolicy, Scenario,
};

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DCF: ProtocolKind = ProtocolKind::Dcf;
const ECA: ProtocolKind = ProtocolKind::Eca;
const SR: ProtocolKind = ProtocolKind::ECA_HYST_SR;

fn simulate(s: &Scenario, protocol: ProtocolKind, seed: u64, duration_s: f64) -> RunResult {
    let cfg = SimConfig {
        duration_s,
        seed,
        protocol,
        channel: s.channel,
        ..SimConfig::default()
    };
    run(&s.topology, &cfg).expect("valid scenario")
}

fn overall(r: &RunResult) -> (f64, f64, f64) {
    let row = &aggregate(r, Grouping::Overall).unwrap()[0];
    (
        row.throughput_mbps,
        row.failure_fraction,
        row.attempts as f64,
    )
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Straight transcription of the path-loss formula, kept independent of the
// library: piecewise in distance, logarithms taken as ln / ln 10.
fn path_loss_oracle(d: f64, fc: f64, walls: u32, floors: u32) -> f64 {
    let lg = |x: f64| x.ln() / std::f64::consts::LN_10;
    let mut pl = 40.05 + 20.0 * lg(fc / 5.0e9);
    if d <= 5.0 {
        pl += 20.0 * lg(d);
    } else {
        pl += 20.0 * lg(5.0) + 35.0 * lg(d / 5.0);
    }
    pl + 17.0 * floors as f64 + 12.0 * walls as f64
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7b);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = rng.gen_range(0.1..150.0);
        let fc = rng.gen_range(2.4e9..6.0e9);
        let floors = rng.gen_range(0..5);
        let walls = rng.gen_range(0..10);
        let params = PathLossParams {
            carrier_frequency_hz: fc,
            ..PathLossParams::default()
        };
        let got = path_loss(d, &params, ObstacleCount { walls, floors }).unwrap();
        worst = worst.max((got - path_loss_oracle(d, fc, walls, floors)).abs());
    }
    check(
        worst <= 0.01,
        format!("max |error| {worst:.2e} dB over 50 tuples"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn criterion_2() -> Outcome {
    let mut bad = Vec::new();
    // latest failure seen in any run; everything after it is collision-free
    let mut settled_us = 0;
    for n in 2..=7 {
        let s = gen_single_ap(n, 5.0, true).unwrap();
        for seed in SEEDS {
            let r = simulate(&s, ECA, seed, 25.0);
            if !r.collision_free_after_first_successes() {
                bad.push(format!("N={n} seed={seed}"));
            }
            let last = r.stations().filter_map(|x| x.last_failure_us).max();
            settled_us = settled_us.max(last.unwrap_or(0));
        }
    }
    let settled = format!(
        "every run is failure-free after t = {:.3} s",
        settled_us as f64 / 1e6
    );
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("30 runs collision-free after every station's first success; {settled}")
        } else {
            format!(
                "{} of 30 runs fail after every station's first success ({}); {settled}",
                bad.len(),
                bad.join(", ")
            )
        },
    )
}

fn criterion_3() -> Outcome {
    let s = gen_single_ap(1, 5.0, true).unwrap();
    let bits = 1470.0 * 8.0;
    let dcf_cycle = 34.0 + 7.5 * 9.0 + 211.0 + 16.0 + 25.0;
    let eca_cycle = 34.0 + 7.0 * 9.0 + 211.0 + 16.0 + 25.0;
    let mut parts = Vec::new();
    let mut ok = true;
    for (p, cycle) in [(DCF, dcf_cycle), (ECA, eca_cycle)] {
        let r = simulate(&s, p, 1, 25.0);
        let sta = r.stations().next().unwrap();
        let got = throughput_mbps(&sta.stats, r.sim_seconds);
        let want = bits / cycle;
        let rel = (got - want).abs() / want;
        ok &= rel <= 0.01 && sta.stats.failures == 0;
        parts.push(format!("{} {got:.3} vs {want:.3} Mbit/s", p.name()));
    }
    check(ok, parts.join(", "))
}

fn criterion_4() -> Outcome {
    let ns = [5, 10, 20, 30];
    let mut m: BTreeMap<(usize, String), (f64, f64)> = BTreeMap::new();
    for &n in &ns {
        let s = gen_single_ap(n, 5.0, true).unwrap();
        for p in [DCF, ECA, SR] {
            let runs: Vec<_> = SEEDS
                .iter()
                .map(|&seed| overall(&simulate(&s, p, seed, 25.0)))
                .collect();
            m.insert(
                (n, p.name()),
                (
                    mean(runs.iter().map(|r| r.0)),
                    mean(runs.iter().map(|r| r.1)),
                ),
            );
        }
    }
    let g = |n: usize, p: ProtocolKind| m[&(n, p.name())];
    let mut why = Vec::new();
    for w in ns.windows(2) {
        if g(w[1], DCF).0 >= g(w[0], DCF).0 {
            why.push(format!("DCF throughput not decreasing {}->{}", w[0], w[1]));
        }
        if g(w[1], DCF).1 <= g(w[0], DCF).1 {
            why.push(format!("DCF failures not increasing {}->{}", w[0], w[1]));
        }
    }
    for &n in &ns {
        if g(n, ECA).0 < g(n, DCF).0 {
            why.push(format!("ECA below DCF at N={n}"));
        }
    }
    for n in [20, 30] {
        if !(g(n, SR).1 < g(n, ECA).1 && g(n, ECA).1 < g(n, DCF).1) {
            why.push(format!("failure order broken at N={n}"));
        }
    }
    let summary = ns
        .iter()
        .map(|&n| {
            format!(
                "N={n}: S {:.1}/{:.1}/{:.1}, ff {:.3}/{:.3}/{:.4}",
                g(n, DCF).0,
                g(n, ECA).0,
                g(n, SR).0,
                g(n, DCF).1,
                g(n, ECA).1,
                g(n, SR).1
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(
        why.is_empty(),
        format!(
            "dcf/eca/hyst+sr {summary}{}",
            if why.is_empty() {
                String::new()
            } else {
                format!(" -- {}", why.join(", "))
            }
        ),
    )
}

fn criterion_5() -> Outcome {
    let s = gen_scenario_a(3, 4, 15.0, 5.0, true).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let r = simulate(&s, DCF, seed, 25.0);
        let rows = aggregate(&r, Grouping::PerWlan).unwrap();
        let t: Vec<f64> = rows.iter().map(|row| row.throughput_mbps).collect();
        ok &= t[1] < t[0] && t[1] < t[2];
        lines.push(format!("{:.1}/{:.1}/{:.1}", t[0], t[1], t[2]));
    }
    check(ok, format!("per-WLAN Mbit/s by seed: {}", lines.join(", ")))
}

fn criterion_6() -> Outcome {
    let mut wlan_jfi = BTreeMap::new();
    let mut ff = BTreeMap::new();
    for p in [DCF, ECA, SR] {
        let mut j = Vec::new();
        let mut f = Vec::new();
        for seed in SEEDS {
            let s = gen_scenario_b(10, 20, 15.0, 5.0, seed).unwrap();
            let r = simulate(&s, p, seed, 25.0);
            j.extend(
                aggregate(&r, Grouping::PerWlan)
                    .unwrap()
                    .iter()
                    .map(|row| row.jfi),
            );
            f.push(overall(&r).1);
        }
        wlan_jfi.insert(p.name(), mean(j));
        ff.insert(p.name(), mean(f));
    }
    let (sr, dcf, eca) = (SR.name(), DCF.name(), ECA.name());
    let ok = wlan_jfi[&sr] >= wlan_jfi[&dcf] && ff[&sr] < ff[&dcf] && ff[&sr] < ff[&eca];
    check(
        ok,
        format!(
            "A=10 N=20; per-WLAN JFI dcf {:.3} eca {:.3} hyst+sr {:.3}; failure fraction dcf {:.3} eca {:.3} hyst+sr {:.3}",
            wlan_jfi[&dcf], wlan_jfi[&eca], wlan_jfi[&sr], ff[&dcf], ff[&eca], ff[&sr]
        ),
    )
}

// Brute-force sub-schedule check: step a deterministic countdown of
// `candidate` slot by slot over the observation window and reject it if it
// would ever transmit in a slot seen busy.
fn sub_schedule_oracle(bitmap: &[bool], candidate: u32) -> bool {
    let mut counter = candidate;
    for &busy in bitmap {
        if counter == 0 {
            if busy {
                return false;
            }
            counter = candidate;
        } else {
            counter -= 1;
        }
    }
    true
}

fn sr_state(stage: u32, bitmap: Vec<bool>, variant: SrVariant, p: &MacParams) -> BackoffState {
    let bd = deterministic_backoff(stage, p);
    let mut sr = SrState::new(bd, variant, p);
    assert_eq!(sr.bitmap.len(), bitmap.len());
    sr.bitmap = bitmap;
    sr.tx_since_eval = sr.gamma_target;
    BackoffState {
        stage,
        counter: bd,
        retries: 0,
        stickiness_left: 0,
        deterministic: true,
        sr: Some(sr),
    }
}

fn expected_stage(bitmap: &[bool], stage: u32, variant: SrVariant, p: &MacParams) -> u32 {
    let candidates: Vec<u32> = match variant {
        SrVariant::Conservative => (0..stage).collect(),
        SrVariant::Aggressive => stage.checked_sub(1).into_iter().collect(),
    };
    candidates
        .into_iter()
        .find(|&k| sub_schedule_oracle(bitmap, deterministic_backoff(k, p)))
        .unwrap_or(stage)
}

fn criterion_7() -> Outcome {
    let p = MacParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e7);
    let mut cases = 0u64;
    let mut mismatches = Vec::new();
    let mut reversal_errors = 0u64;
    for variant in [SrVariant::Conservative, SrVariant::Aggressive] {
        let proto = ProtocolKind::EcaHystSr {
            sr_variant: variant,
            reduced_cw_max: None,
        };
        let mut one = |stage: u32, bitmap: Vec<bool>| {
            cases += 1;
            let want = expected_stage(&bitmap, stage, variant, &p);
            let st = sr_evaluate(sr_state(stage, bitmap.clone(), variant, &p), &p);
            if st.stage != want {
                mismatches.push(format!("{variant:?} stage {stage} len {}", bitmap.len()));
            }
            if st.stage != stage {
                let sr = st.sr.as_ref().unwrap();
                let ok_mark = sr.just_changed
                    && sr.previous_bd == Some(deterministic_backoff(stage, &p))
                    && st.counter == deterministic_backoff(want, &p);
                let mut r = ChaCha8Rng::seed_from_u64(cases);
                let back = after_failure(st, proto, &p, &mut r).into_state();
                if !ok_mark
                    || back.bd(&p) != deterministic_backoff(stage, &p)
                    || back.stage != stage
                {
                    reversal_errors += 1;
                }
            }
        };
        // every bitmap of the 8- and 16-slot windows
        for (stage, len) in [(0u32, 8usize), (1, 16)] {
            for bits in 0u32..(1 << len) {
                one(stage, (0..len).map(|i| bits >> i & 1 == 1).collect());
            }
        }
        for (stage, len) in [(2u32, 32usize), (3, 64)] {
            for _ in 0..20_000 {
                let density = rng.gen_range(0.0..0.3);
                one(stage, (0..len).map(|_| rng.gen_bool(density)).collect());
            }
        }
    }
    check(
        mismatches.is_empty() && reversal_errors == 0,
        format!(
            "{cases} bitmaps, {} disagreements with the oracle, {reversal_errors} bad reversals",
            mismatches.len()
        ),
    )
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Success,
    Failure,
    Idle,
    IdleRun,
    Busy,
    Freeze,
}

fn fuzz_protocol(proto: ProtocolKind, sequences: u64, seed: u64) -> Result<u64, String> {
    let base = MacParams::default();
    let p = proto.effective_params(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = 0u64;
    for seq in 0..sequences {
        let mut s = BackoffState::initial(&p, &mut rng);
        let len = rng.gen_range(1..=24);
        for _ in 0..len {
            let ev = match rng.gen_range(0..6) {
                0 => Event::Success,
                1 => Event::Failure,
                2 => Event::Idle,
                3 => Event::IdleRun,
                4 => Event::Busy,
                _ => Event::Freeze,
            };
            events += 1;
            let before = s.clone();
            let fail = |what: &str| {
                Err(format!(
                    "{} seq {seq} {ev:?}: {what}; before {before:?}",
                    proto.name()
                ))
            };
            s = match ev {
                Event::Success => {
                    let after = after_success(s, proto, &base, &mut rng);
                    match proto {
                        ProtocolKind::Dcf if after.stage != 0 => return fail("stage not reset"),
                        ProtocolKind::Eca
                            if after.stage != 0
                                || after.counter != deterministic_backoff(0, &p) =>
                        {
                            return fail("ECA did not restart at Bd(0)")
                        }
                        ProtocolKind::EcaHyst if after.stage != before.stage => {
                            return fail("stage changed")
                        }
                        ProtocolKind::EcaHystSr { .. } if after.stage > before.stage => {
                            return fail("SR grew the schedule")
                        }
                        _ => {}
                    }
                    if proto.has_hysteresis()
                        && (!after.deterministic
                            || after.counter != deterministic_backoff(after.stage, &p))
                    {
                        return fail("post-success backoff not deterministic");
                    }
                    after
                }
                Event::Failure => {
                    let out = after_failure(s, proto, &base, &mut rng);
                    let dropped = matches!(out, FailureOutcome::Dropped(_));
                    let after = out.into_state();
                    if dropped != (before.retries + 1 > p.retry_limit) {
                        return fail("drop decision");
                    }
                    if dropped {
                        if after.retries != 0 || after.deterministic {
                            return fail("drop did not reset");
                        }
                        if proto == DCF && after.stage != 0 {
                            return fail("DCF drop kept its stage");
                        }
                    } else if proto.has_hysteresis() {
                        let mut stage = before.stage;
                        if let Some(sr) = before.sr.as_ref().filter(|sr| sr.just_changed) {
                            stage = sr
                                .previous_bd
                                .and_then(|bd| stage_for_backoff(bd, &p))
                                .unwrap_or(stage);
                        }
                        if before.deterministic && before.stickiness_left > 0 {
                            if after.stage != stage
                                || after.stickiness_left != before.stickiness_left - 1
                                || after.counter != deterministic_backoff(stage, &p)
                            {
                                return fail("stickiness not consumed");
                            }
                        } else if after.stage != (stage + 1).min(p.max_stage())
                            || after.deterministic
                        {
                            return fail("no escalation without stickiness");
                        }
                    } else if after.stage != (before.stage + 1).min(p.max_stage()) {
                        return fail("no escalation");
                    }
                    after
                }
                Event::Idle if s.counter > 0 => on_idle_slot(s),
                Event::IdleRun if s.counter > 0 => {
                    let n = rng.gen_range(1..=s.counter);
                    on_idle_slots(s, n)
                }
                Event::Busy if s.counter > 0 => {
                    let after = on_busy_slot(s);
                    if after.counter != before.counter - 1 {
                        return fail("busy slot did not consume one unit");
                    }
                    after
                }
                Event::Freeze => {
                    let after = on_busy_freeze(s);
                    if after.counter != before.counter {
                        return fail("frozen counter moved");
                    }
                    after
                }
                _ => s,
            };
            if s.stage > p.max_stage() || s.counter >= contention_window(s.stage, &p) {
                return Err(format!(
                    "{} seq {seq}: counter {} outside [0, CW({})-1]",
                    proto.name(),
                    s.counter,
                    s.stage
                ));
            }
            if let Some(sr) = &s.sr {
                let want = match sr.variant {
                    SrVariant::Conservative => gamma(s.bd(&p), &p),
                    SrVariant::Aggressive => 1,
                };
                if sr.bitmap.len() as u32 == s.bd(&p) + 1 && sr.gamma_target != want {
                    return Err(format!(
                        "{} seq {seq}: SR window target {} for Bd {}",
                        proto.name(),
                        sr.gamma_target,
                        s.bd(&p)
                    ));
                }
            }
        }
    }
    Ok(events)
}

fn criterion_8() -> Outcome {
    let protocols = [
        DCF,
        ECA,
        ProtocolKind::EcaHyst,
        SR,
        ProtocolKind::parse("eca_hyst_sr_aggr").unwrap(),
        ProtocolKind::parse("eca_hyst_sr_r256").unwrap(),
    ];
    let mut total = 0;
    for (i, p) in protocols.iter().enumerate() {
        total += fuzz_protocol(*p, 1_000_000, 1000 + i as u64)?;
    }
    Ok(format!(
        "10^6 sequences for each of {} protocols, {total} events",
        protocols.len()
    ))
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.extension().and_then(|x| x.to_str()),
                Some("csv" | "tsv")
            ) {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let text = "scenario = scenario_b\nprotocols = dcf, eca_hyst_sr\naps = 3\nstations = 4, 6\niterations = 2\nduration = 1\nseed = 9\n";
    let run_in = |name: &str| {
        let out = tmp.path().join(name);
        let spec = parse_spec(
            Some(("determinism.spec", text)),
            &[("out".into(), out.display().to_string())],
        )
        .unwrap();
        execute(&spec).unwrap();
        out
    };
    let a = run_in("a");
    let b = run_in("b");
    let again = parse_spec_file(
        &a.join("manifest.txt"),
        &[("out".into(), tmp.path().join("c").display().to_string())],
    )
    .and_then(|s| execute(&s));
    if let Err(e) = again {
        return Err(format!("manifest did not re-execute: {e}"));
    }
    let (oa, ob, oc) = (outputs(&a), outputs(&b), outputs(&tmp.path().join("c")));
    check(
        !oa.is_empty() && oa == ob && oa == oc,
        format!(
            "{} CSV/TSV files byte-identical across two runs and a manifest rerun",
            oa.len()
        ),
    )
}

fn criterion_10() -> Outcome {
    let geometry = BuildingGeometry {
        floors: 2,
        rooms_x: 5,
        rooms_y: 2,
        ..BuildingGeometry::default()
    };
    let policies = [
        ChannelPolicy::SingleChannel,
        ChannelPolicy::EightTypeAB,
        ChannelPolicy::TwentyGrid,
    ];
    let protocols = [DCF, ECA, SR];
    // (policy, protocol) -> (throughput, failure fraction, attempts)
    let mut m = BTreeMap::new();
    for (pi, policy) in policies.iter().enumerate() {
        for (qi, &p) in protocols.iter().enumerate() {
            let runs: Vec<_> = SEEDS
                .iter()
                .map(|&seed| {
                    let mut s = gen_hew_building(geometry, 5, seed).unwrap();
                    s.topology = allocate_channels(s.topology, policy, seed).unwrap();
                    overall(&simulate(&s, p, seed, 25.0))
                })
                .collect();
            m.insert(
                (pi, qi),
                (
                    mean(runs.iter().map(|r| r.0)),
                    mean(runs.iter().map(|r| r.1)),
                    mean(runs.iter().map(|r| r.2)),
                ),
            );
        }
    }
    let mut why = Vec::new();
    for (qi, p) in protocols.iter().enumerate() {
        let (single, eight, twenty) = (m[&(0, qi)].0, m[&(1, qi)].0, m[&(2, qi)].0);
        if !(twenty > eight && eight > single) {
            why.push(format!(
                "{}: S {twenty:.1} / {eight:.1} / {single:.1}",
                p.name()
            ));
        }
    }
    for (pi, policy) in policies.iter().enumerate() {
        let sr = m[&(pi, 2)];
        for qi in 0..2 {
            let o = m[&(pi, qi)];
            if !(sr.2 < o.2 && sr.1 < o.1) {
                why.push(format!(
                    "{}: hyst+sr not lowest vs {}",
                    policy.name(),
                    protocols[qi].name()
                ));
            }
        }
    }
    let summary = policies
        .iter()
        .enumerate()
        .map(|(pi, pol)| {
            format!(
                "{} S {:.0}/{:.0}/{:.0}",
                pol.name(),
                m[&(pi, 0)].0,
                m[&(pi, 1)].0,
                m[&(pi, 2)].0
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(
        why.is_empty(),
        format!(
            "dcf/eca/hyst+sr {summary}{}",
            if why.is_empty() {
                String::new()
            } else {
                format!(" -- {}", why.join(", "))
            }
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("path-loss oracle", criterion_1),
        ("collision-free convergence", criterion_2),
        ("single-node saturation throughput", criterion_3),
        ("DCF degradation trend", criterion_4),
        ("scenario A control starvation", criterion_5),
        ("scenario B fairness", criterion_6),
        ("schedule reset properties", criterion_7),
        ("backoff invariant fuzzing", criterion_8),
        ("determinism", criterion_9),
        ("channel allocation trend", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} PASS  {name} ({secs:.1} s): {detail}",
                i + 1
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "criterion {:>2} FAIL  {name} ({secs:.1} s): {detail}",
                    i + 1
                );
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
