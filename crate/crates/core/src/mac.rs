//! Per-node contention state machines.
//!
//! Every node carries a [`BackoffState`]. The engine feeds it slot
//! observations ([`on_idle_slot`], [`on_busy_slot`], [`on_busy_freeze`]) while
//! the node counts down, and the outcome of each transmission
//! ([`after_success`], [`after_failure`]). The [`ProtocolKind`] decides how the
//! next backoff is chosen:
//!
//! | protocol      | after success                        | after failure                         |
//! |---------------|--------------------------------------|---------------------------------------|
//! | `Dcf`         | stage 0, random in `[0, CWmin-1]`    | stage + 1, random in `[0, CW(k)-1]`   |
//! | `Eca`         | stage 0, deterministic `Bd(0) = 7`   | as DCF                                |
//! | `EcaHyst`     | keep stage, deterministic `Bd(k)`    | stick while stickiness lasts, else as DCF |
//! | `EcaHystSr`   | as `EcaHyst`, plus Schedule Reset    | revert a fresh schedule change first  |
//!
//! with `CW(k) = min(2^k CWmin, CWmax)` and `Bd(k) = ceil(CW(k)/2) - 1`.

use rand::Rng;

use crate::{Error, Result};

/// Contention parameters. Durations are in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacParams {
    pub cw_min: u32,
    pub cw_max: u32,
    pub retry_limit: u32,
    pub slot_us: u64,
    pub difs_us: u64,
    pub sifs_us: u64,
    pub default_stickiness: u32,
}

impl Default for MacParams {
    fn default() -> Self {
        MacParams {
            cw_min: 16,
            cw_max: 1024,
            retry_limit: 7,
            slot_us: 9,
            difs_us: 34,
            sifs_us: 16,
            default_stickiness: 1,
        }
    }
}

impl MacParams {
    /// Highest backoff stage `m`, with `cw_max = 2^m cw_min`.
    pub fn max_stage(&self) -> u32 {
        (self.cw_max / self.cw_min).trailing_zeros()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cw_min.is_power_of_two() || self.cw_min < 2 {
            return Err(Error::config(format!(
                "cw_min must be a power of two >= 2, got {}",
                self.cw_min
            )));
        }
        if !self.cw_max.is_power_of_two() || self.cw_max < self.cw_min {
            return Err(Error::config(format!(
                "cw_max must be a power of two >= cw_min, got {}",
                self.cw_max
            )));
        }
        if self.retry_limit < 1 {
            return Err(Error::config("retry_limit must be at least 1"));
        }
        if self.slot_us == 0 || self.difs_us == 0 || self.sifs_us == 0 {
            return Err(Error::config("slot, DIFS and SIFS must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SrVariant {
    /// Evaluate after `gamma(Bd)` transmissions, try every smaller schedule.
    Conservative,
    /// Evaluate after every transmission, try only halving the schedule.
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolKind {
    Dcf,
    Eca,
    EcaHyst,
    EcaHystSr {
        sr_variant: SrVariant,
        /// Lower `cw_max` used by this protocol instead of the global one.
        reduced_cw_max: Option<u32>,
    },
}

impl ProtocolKind {
    /// The reference ECA configuration: Hysteresis plus conservative
    /// Schedule Reset.
    pub const ECA_HYST_SR: ProtocolKind = ProtocolKind::EcaHystSr {
        sr_variant: SrVariant::Conservative,
        reduced_cw_max: None,
    };

    pub fn has_hysteresis(&self) -> bool {
        matches!(self, ProtocolKind::EcaHyst | ProtocolKind::EcaHystSr { .. })
    }

    pub fn schedule_reset(&self) -> Option<SrVariant> {
        match self {
            ProtocolKind::EcaHystSr { sr_variant, .. } => Some(*sr_variant),
            _ => None,
        }
    }

    /// `params` with any protocol-specific override applied.
    pub fn effective_params(&self, params: &MacParams) -> MacParams {
        match self {
            ProtocolKind::EcaHystSr {
                reduced_cw_max: Some(cap),
                ..
            } => MacParams {
                cw_max: *cap,
                ..*params
            },
            _ => *params,
        }
    }

    pub fn validate(&self, params: &MacParams) -> Result<()> {
        if let ProtocolKind::EcaHystSr {
            reduced_cw_max: Some(cap),
            ..
        } = self
        {
            if !cap.is_power_of_two() || *cap > params.cw_max || *cap < params.cw_min {
                return Err(Error::config(format!(
                    "reduced cw_max must be a power of two in [cw_min, cw_max], got {cap}"
                )));
            }
        }
        Ok(())
    }

    /// Short name used on the command line and in output files.
    pub fn name(&self) -> String {
        match self {
            ProtocolKind::Dcf => "dcf".into(),
            ProtocolKind::Eca => "eca".into(),
            ProtocolKind::EcaHyst => "eca_hyst".into(),
            ProtocolKind::EcaHystSr {
                sr_variant,
                reduced_cw_max,
            } => {
                let mut s = String::from("eca_hyst_sr");
                if *sr_variant == SrVariant::Aggressive {
                    s.push_str("_aggr");
                }
                if let Some(cap) = reduced_cw_max {
                    s.push_str(&format!("_r{cap}"));
                }
                s
            }
        }
    }

    /// Inverse of [`name`](Self::name). `eca_hyst_sr_r` alone means a
    /// reduced `cw_max` of 256.
    pub fn parse(s: &str) -> Option<ProtocolKind> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "dcf" => return Some(ProtocolKind::Dcf),
            "eca" => return Some(ProtocolKind::Eca),
            "eca_hyst" => return Some(ProtocolKind::EcaHyst),
            _ => {}
        }
        let mut rest = s.strip_prefix("eca_hyst_sr")?;
        let mut sr_variant = SrVariant::Conservative;
        if let Some(r) = rest.strip_prefix("_aggr") {
            sr_variant = SrVariant::Aggressive;
            rest = r;
        }
        let reduced_cw_max = if rest.is_empty() {
            None
        } else if rest == "_r" {
            Some(256)
        } else {
            Some(rest.strip_prefix("_r")?.parse().ok()?)
        };
        Some(ProtocolKind::EcaHystSr {
            sr_variant,
            reduced_cw_max,
        })
    }
}

/// Schedule Reset bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrState {
    /// One flag per slot offset since the node's own last transmission;
    /// `true` once the slot was seen busy during the observation window.
    pub bitmap: Vec<bool>,
    pub tx_since_eval: u32,
    pub gamma_target: u32,
    pub just_changed: bool,
    pub previous_bd: Option<u32>,
    /// Offset of the next slot to record.
    pub cursor: usize,
    pub variant: SrVariant,
}

impl SrState {
    pub fn new(bd: u32, variant: SrVariant, params: &MacParams) -> Self {
        SrState {
            bitmap: vec![false; bd as usize + 1],
            tx_since_eval: 0,
            gamma_target: match variant {
                SrVariant::Conservative => gamma(bd, params),
                SrVariant::Aggressive => 1,
            },
            just_changed: false,
            previous_bd: None,
            cursor: 0,
            variant,
        }
    }

    fn restart(&mut self, bd: u32, params: &MacParams) {
        let fresh = SrState::new(bd, self.variant, params);
        self.bitmap = fresh.bitmap;
        self.tx_since_eval = 0;
        self.gamma_target = fresh.gamma_target;
        self.cursor = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackoffState {
    pub stage: u32,
    /// Remaining backoff slots.
    pub counter: u32,
    pub retries: u32,
    pub stickiness_left: u32,
    /// True while the node runs on a deterministic backoff.
    pub deterministic: bool,
    pub sr: Option<SrState>,
}

impl BackoffState {
    /// State for a fresh saturated source: stage 0, random first backoff.
    pub fn initial<R: Rng + ?Sized>(params: &MacParams, rng: &mut R) -> Self {
        BackoffState {
            stage: 0,
            counter: rng.gen_range(0..params.cw_min),
            retries: 0,
            stickiness_left: 0,
            deterministic: false,
            sr: None,
        }
    }

    /// Current deterministic backoff `Bd(k)` for the retained stage.
    pub fn bd(&self, params: &MacParams) -> u32 {
        deterministic_backoff(self.stage, params)
    }
}

/// `CW(k) = min(2^k CWmin, CWmax)`.
///
/// Panics if `stage` exceeds the maximum stage.
pub fn contention_window(stage: u32, params: &MacParams) -> u32 {
    assert!(
        stage <= params.max_stage(),
        "stage {stage} out of range 0..={}",
        params.max_stage()
    );
    (params.cw_min << stage).min(params.cw_max)
}

/// `Bd(k) = ceil(CW(k)/2) - 1`.
pub fn deterministic_backoff(stage: u32, params: &MacParams) -> u32 {
    contention_window(stage, params).div_ceil(2) - 1
}

/// Number of own transmissions observed before a conservative Schedule
/// Reset evaluation: `(CWmax/2) / (Bd + 1)`.
pub fn gamma(bd: u32, params: &MacParams) -> u32 {
    ((params.cw_max / 2) / (bd + 1)).max(1)
}

/// Frames aggregated per attempt by a Fair Share node at `stage`.
pub fn fair_share_count(stage: u32) -> u32 {
    1 << stage
}

/// The stage whose deterministic backoff is `bd`, if any.
pub fn stage_for_backoff(bd: u32, params: &MacParams) -> Option<u32> {
    (0..=params.max_stage()).find(|&k| deterministic_backoff(k, params) == bd)
}

fn random_backoff<R: Rng + ?Sized>(stage: u32, params: &MacParams, rng: &mut R) -> u32 {
    rng.gen_range(0..contention_window(stage, params))
}

/// Update after an acknowledged transmission.
pub fn after_success<R: Rng + ?Sized>(
    mut state: BackoffState,
    protocol: ProtocolKind,
    params: &MacParams,
    rng: &mut R,
) -> BackoffState {
    let params = protocol.effective_params(params);
    let was_deterministic = state.deterministic;
    state.retries = 0;
    match protocol {
        ProtocolKind::Dcf => {
            state.stage = 0;
            state.counter = random_backoff(0, &params, rng);
            state.deterministic = false;
        }
        ProtocolKind::Eca => {
            state.stage = 0;
            state.counter = deterministic_backoff(0, &params);
            state.deterministic = true;
        }
        ProtocolKind::EcaHyst | ProtocolKind::EcaHystSr { .. } => {
            let bd = deterministic_backoff(state.stage, &params);
            state.counter = bd;
            state.deterministic = true;
            state.stickiness_left = params.default_stickiness;
            if let Some(variant) = protocol.schedule_reset() {
                let sr = state
                    .sr
                    .get_or_insert_with(|| SrState::new(bd, variant, &params));
                sr.just_changed = false;
                sr.previous_bd = None;
                if was_deterministic && sr.bitmap.len() == bd as usize + 1 {
                    sr.tx_since_eval += 1;
                    sr.cursor = 0;
                } else {
                    sr.restart(bd, &params);
                }
                if sr.tx_since_eval >= sr.gamma_target {
                    state = sr_evaluate(state, &params);
                }
            }
        }
    }
    state
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureOutcome {
    /// The frame stays queued and is retried with the returned state.
    Retry(BackoffState),
    /// The retry limit was exceeded; the frame is discarded and the next
    /// one starts from the returned state.
    Dropped(BackoffState),
}

impl FailureOutcome {
    pub fn into_state(self) -> BackoffState {
        match self {
            FailureOutcome::Retry(s) | FailureOutcome::Dropped(s) => s,
        }
    }

    pub fn is_dropped(&self) -> bool {
        matches!(self, FailureOutcome::Dropped(_))
    }
}

/// Update after an unacknowledged transmission.
pub fn after_failure<R: Rng + ?Sized>(
    mut state: BackoffState,
    protocol: ProtocolKind,
    params: &MacParams,
    rng: &mut R,
) -> FailureOutcome {
    let params = protocol.effective_params(params);
    let m = params.max_stage();
    state.retries += 1;

    if state.retries > params.retry_limit {
        if protocol == ProtocolKind::Dcf {
            state.stage = 0;
        }
        state.retries = 0;
        state.counter = random_backoff(state.stage, &params, rng);
        state.deterministic = false;
        state.stickiness_left = 0;
        if let Some(sr) = state.sr.as_mut() {
            sr.just_changed = false;
            sr.previous_bd = None;
            sr.restart(deterministic_backoff(state.stage, &params), &params);
        }
        return FailureOutcome::Dropped(state);
    }

    if protocol.has_hysteresis() {
        if let Some(sr) = state.sr.as_mut() {
            if sr.just_changed {
                if let Some(stage) = sr.previous_bd.and_then(|bd| stage_for_backoff(bd, &params)) {
                    state.stage = stage;
                }
                sr.just_changed = false;
                sr.previous_bd = None;
            }
        }
        if state.deterministic && state.stickiness_left > 0 {
            state.stickiness_left -= 1;
            state.counter = deterministic_backoff(state.stage, &params);
        } else {
            state.stage = (state.stage + 1).min(m);
            state.counter = random_backoff(state.stage, &params, rng);
            state.deterministic = false;
        }
        let bd = deterministic_backoff(state.stage, &params);
        if let Some(sr) = state.sr.as_mut() {
            sr.restart(bd, &params);
        }
    } else {
        state.stage = (state.stage + 1).min(m);
        state.counter = random_backoff(state.stage, &params, rng);
        state.deterministic = false;
    }
    FailureOutcome::Retry(state)
}

/// Marks one slot of the observation window. Offsets past the end of the
/// bitmap are ignored.
pub fn sr_record_slot(mut sr: SrState, slot_index: usize, busy: bool) -> SrState {
    if let Some(flag) = sr.bitmap.get_mut(slot_index) {
        *flag |= busy;
    }
    sr
}

/// Would a deterministic schedule of `candidate` slots have transmitted
/// only in slots observed idle?
pub fn sr_candidate_fits(bitmap: &[bool], candidate: u32) -> bool {
    let period = candidate as usize + 1;
    (1..)
        .map(|j| j * period - 1)
        .take_while(|&idx| idx < bitmap.len())
        .all(|idx| !bitmap[idx])
}

/// Evaluates the Schedule Reset bitmap, possibly shrinking the
/// deterministic backoff, then starts a new observation window.
pub fn sr_evaluate(mut state: BackoffState, params: &MacParams) -> BackoffState {
    let Some(mut sr) = state.sr.take() else {
        return state;
    };
    let current = deterministic_backoff(state.stage, params);
    let candidates: Vec<u32> = match sr.variant {
        SrVariant::Conservative => (0..state.stage).collect(),
        SrVariant::Aggressive => state.stage.checked_sub(1).into_iter().collect(),
    };
    let accepted = candidates
        .into_iter()
        .find(|&k| sr_candidate_fits(&sr.bitmap, deterministic_backoff(k, params)));
    if let Some(k) = accepted {
        let bd = deterministic_backoff(k, params);
        state.stage = k;
        state.counter = bd;
        state.stickiness_left += 1;
        sr.just_changed = true;
        sr.previous_bd = Some(current);
    }
    sr.restart(deterministic_backoff(state.stage, params), params);
    state.sr = Some(sr);
    state
}

fn record(state: &mut BackoffState, busy: bool, slots: usize) {
    if !state.deterministic {
        return;
    }
    if let Some(sr) = state.sr.as_mut() {
        if busy {
            if let Some(flag) = sr.bitmap.get_mut(sr.cursor) {
                *flag = true;
            }
        }
        sr.cursor += slots;
    }
}

/// One idle slot elapsed: the counter decrements.
///
/// Panics if the counter is already zero; the node should have transmitted.
pub fn on_idle_slot(state: BackoffState) -> BackoffState {
    on_idle_slots(state, 1)
}

/// `n` consecutive idle slots.
pub fn on_idle_slots(mut state: BackoffState, n: u32) -> BackoffState {
    assert!(
        n <= state.counter,
        "{n} idle slots with only {} left on the counter",
        state.counter
    );
    state.counter -= n;
    record(&mut state, false, n as usize);
    state
}

/// A busy period under strict freezing: the counter holds, the slot is
/// recorded busy.
pub fn on_busy_freeze(mut state: BackoffState) -> BackoffState {
    record(&mut state, true, 1);
    state
}

/// A busy period counted as one virtual slot: recorded busy and, like an
/// idle slot, it consumes one unit of backoff.
///
/// Panics if the counter is already zero.
pub fn on_busy_slot(mut state: BackoffState) -> BackoffState {
    assert!(state.counter > 0, "busy slot with an expired counter");
    state.counter -= 1;
    record(&mut state, true, 1);
    state
}
