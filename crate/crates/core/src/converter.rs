//! Steady-state analysis of the dual-active-bridge converter under triple
//! phase shift modulation.
//!
//! Time inside a switching period is handled in units of the half period
//! `T = 1 / (2 fs)`, so a full period spans `[0, 2)`. The primary bridge
//! voltage `vp` carries a `+V1` pulse on `[0, d1)` and the mirrored `-V1`
//! pulse on `[1, 1 + d1)`. The secondary voltage carries a `+n V2` pulse of
//! width `d2` whose centre trails the centre of the primary pulse by `d0`,
//! plus its mirror one half period later. Measuring `d0` between pulse
//! centres makes transferred power odd in `d0` for every duty pair.
//!
//! With ideal switches and a lossless tank the inductor current is piecewise
//! linear between switching edges, so the exact periodic solution follows
//! from one pass over at most eight segments.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of distinct switching segments in one period.
pub const MAX_SEGMENTS: usize = 8;

/// Edges closer than this (in half-period units) are merged.
const EDGE_TOL: f64 = 1e-12;

/// Points in the coarse `d0` scan over `[0, 1]` locating the power maximum.
const CAPABILITY_SCAN: usize = 65;

/// Scan points on each side of `d0 = 0` when inverting `p_avg(d0)`.
const INVERSION_SCAN_NEG: usize = 32;
const INVERSION_SCAN_POS: usize = 64;

/// Circuit constants and operating ranges as written in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterSpec {
    pub v1: f64,
    pub fs: f64,
    pub l: f64,
    #[serde(default = "default_turns_ratio")]
    pub n: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub v2_min: f64,
    pub v2_max: f64,
    pub v2_rated: f64,
}

fn default_turns_ratio() -> f64 {
    1.0
}

impl Default for ConverterSpec {
    /// The 1 kW, 200 V / 200 V, 20 kHz design case.
    fn default() -> Self {
        Self {
            v1: 200.0,
            fs: 20e3,
            l: 140e-6,
            n: 1.0,
            p_min: 100.0,
            p_max: 1000.0,
            v2_min: 160.0,
            v2_max: 230.0,
            v2_rated: 200.0,
        }
    }
}

/// Validated converter constants. Construction enforces the inductor sizing
/// bound `L <= n V1 V2 / (8 fs Pmax)` at rated output voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConverterSpec", into = "ConverterSpec")]
pub struct ConverterParams {
    spec: ConverterSpec,
}

impl TryFrom<ConverterSpec> for ConverterParams {
    type Error = Error;

    fn try_from(spec: ConverterSpec) -> Result<Self> {
        let ConverterSpec {
            v1,
            fs,
            l,
            n,
            p_min,
            p_max,
            v2_min,
            v2_max,
            v2_rated,
        } = spec;
        let positive = [("v1", v1), ("fs", fs), ("l", l), ("n", n), ("v2_rated", v2_rated)];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {value}")));
            }
        }
        if !(p_min.is_finite() && p_max.is_finite() && p_min >= 0.0 && p_min < p_max) {
            return Err(Error::InvalidParams(format!(
                "need 0 <= p_min < p_max, got [{p_min}, {p_max}]"
            )));
        }
        if !(v2_min.is_finite() && v2_max.is_finite() && v2_min > 0.0 && v2_min < v2_max) {
            return Err(Error::InvalidParams(format!(
                "need 0 < v2_min < v2_max, got [{v2_min}, {v2_max}]"
            )));
        }
        let limit = n * v1 * v2_rated / (8.0 * fs * p_max);
        if l > limit {
            return Err(Error::InductorSizing {
                l,
                limit,
                v2_rated,
                p_max,
            });
        }
        Ok(Self { spec })
    }
}

impl From<ConverterParams> for ConverterSpec {
    fn from(params: ConverterParams) -> Self {
        params.spec
    }
}

impl Default for ConverterParams {
    fn default() -> Self {
        Self::design_case()
    }
}

impl ConverterParams {
    pub fn design_case() -> Self {
        Self::try_from(ConverterSpec::default()).expect("design case satisfies sizing")
    }

    pub fn spec(&self) -> &ConverterSpec {
        &self.spec
    }
    pub fn v1(&self) -> f64 {
        self.spec.v1
    }
    pub fn fs(&self) -> f64 {
        self.spec.fs
    }
    pub fn l(&self) -> f64 {
        self.spec.l
    }
    pub fn n(&self) -> f64 {
        self.spec.n
    }
    pub fn p_min(&self) -> f64 {
        self.spec.p_min
    }
    pub fn p_max(&self) -> f64 {
        self.spec.p_max
    }
    pub fn v2_min(&self) -> f64 {
        self.spec.v2_min
    }
    pub fn v2_max(&self) -> f64 {
        self.spec.v2_max
    }
    pub fn v2_rated(&self) -> f64 {
        self.spec.v2_rated
    }

    /// Half switching period `T`.
    pub fn half_period(&self) -> f64 {
        0.5 / self.spec.fs
    }

    /// Single-phase-shift power at `d0 = 0.5`: `n V1 V2 / (8 fs L)`.
    pub fn sps_max_power(&self, v2: f64) -> f64 {
        self.spec.n * self.spec.v1 * v2 / (8.0 * self.spec.fs * self.spec.l)
    }
}

/// The three phase shift variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationTriple {
    d0: f64,
    d1: f64,
    d2: f64,
}

impl ModulationTriple {
    pub fn new(d0: f64, d1: f64, d2: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&d0) {
            return Err(Error::InvalidModulation(format!("d0 = {d0} not in [-1, 1]")));
        }
        if !(0.0..=1.0).contains(&d1) {
            return Err(Error::InvalidModulation(format!("d1 = {d1} not in [0, 1]")));
        }
        if !(0.0..=1.0).contains(&d2) {
            return Err(Error::InvalidModulation(format!("d2 = {d2} not in [0, 1]")));
        }
        Ok(Self { d0, d1, d2 })
    }

    /// Single phase shift: both bridges at full duty.
    pub fn sps(d0: f64) -> Result<Self> {
        Self::new(d0, 1.0, 1.0)
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }
    pub fn d1(&self) -> f64 {
        self.d1
    }
    pub fn d2(&self) -> f64 {
        self.d2
    }

    /// Start of the positive secondary pulse, in half periods.
    pub fn secondary_start(&self) -> f64 {
        self.d0 + 0.5 * (self.d1 - self.d2)
    }
}

/// The eight switching edges of one period, in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Edge {
    PrimaryPosRise,
    PrimaryPosFall,
    PrimaryNegRise,
    PrimaryNegFall,
    SecondaryPosRise,
    SecondaryPosFall,
    SecondaryNegRise,
    SecondaryNegFall,
}

impl Edge {
    fn token(self) -> &'static str {
        match self {
            Edge::PrimaryPosRise => "P+r",
            Edge::PrimaryPosFall => "P+f",
            Edge::PrimaryNegRise => "P-r",
            Edge::PrimaryNegFall => "P-f",
            Edge::SecondaryPosRise => "S+r",
            Edge::SecondaryPosFall => "S+f",
            Edge::SecondaryNegRise => "S-r",
            Edge::SecondaryNegFall => "S-f",
        }
    }
}

/// Bridge output states on one segment: `+1`, `0` or `-1` times the DC
/// voltage of that bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BridgeLevels {
    pub primary: i8,
    pub secondary: i8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// Start time in seconds.
    pub start: f64,
    /// End time in seconds.
    pub end: f64,
    pub levels: BridgeLevels,
}

/// Piecewise-constant bridge voltages over one switching period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingSchedule {
    half_period: f64,
    len: usize,
    /// Segment starts in half-period units; `starts[0] == 0`.
    starts: [f64; MAX_SEGMENTS],
    levels: [BridgeLevels; MAX_SEGMENTS],
    edges: [(f64, Edge); 8],
}

/// `u` modulo 2 for the small arguments that occur here (|u| < 8).
fn mod2(mut u: f64) -> f64 {
    while u < 0.0 {
        u += 2.0;
    }
    while u >= 2.0 {
        u -= 2.0;
    }
    u
}

fn wrap(u: f64) -> f64 {
    let r = mod2(u);
    if r >= 2.0 - EDGE_TOL {
        0.0
    } else {
        r
    }
}

/// Whether `u` lies in the pulse `[start, start + width)` taken modulo 2.
fn in_pulse(u: f64, start: f64, width: f64) -> bool {
    mod2(u - start) < width
}

fn three_level(u: f64, start: f64, width: f64) -> i8 {
    in_pulse(u, start, width) as i8 - in_pulse(u, start + 1.0, width) as i8
}

/// Lay out both bridge waveforms for one period and merge their edges.
pub fn synthesize_waveforms(params: &ConverterParams, m: &ModulationTriple) -> SwitchingSchedule {
    let (d1, d2) = (m.d1, m.d2);
    let s0 = m.secondary_start();
    let edges = [
        (0.0, Edge::PrimaryPosRise),
        (wrap(d1), Edge::PrimaryPosFall),
        (1.0, Edge::PrimaryNegRise),
        (wrap(1.0 + d1), Edge::PrimaryNegFall),
        (wrap(s0), Edge::SecondaryPosRise),
        (wrap(s0 + d2), Edge::SecondaryPosFall),
        (wrap(s0 + 1.0), Edge::SecondaryNegRise),
        (wrap(s0 + 1.0 + d2), Edge::SecondaryNegFall),
    ];

    let mut times = [0.0; 8];
    for (t, e) in times.iter_mut().zip(edges.iter()) {
        *t = e.0;
    }
    times.sort_unstable_by(f64::total_cmp);

    let mut starts = [0.0; MAX_SEGMENTS];
    let mut len = 1;
    for &t in &times {
        if t - starts[len - 1] > EDGE_TOL {
            starts[len] = t;
            len += 1;
        }
    }

    let mut levels = [BridgeLevels::default(); MAX_SEGMENTS];
    for k in 0..len {
        let end = if k + 1 < len { starts[k + 1] } else { 2.0 };
        let mid = 0.5 * (starts[k] + end);
        levels[k] = BridgeLevels {
            primary: three_level(mid, 0.0, d1),
            secondary: three_level(mid, s0, d2),
        };
    }

    SwitchingSchedule {
        half_period: params.half_period(),
        len,
        starts,
        levels,
        edges,
    }
}

impl SwitchingSchedule {
    pub fn period(&self) -> f64 {
        2.0 * self.half_period
    }

    pub fn half_period(&self) -> f64 {
        self.half_period
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Segment start times in seconds; the first is always 0.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.starts[..self.len].iter().map(|u| u * self.half_period).collect()
    }

    /// Breakpoints in half-period units.
    pub fn normalized_breakpoints(&self) -> &[f64] {
        &self.starts[..self.len]
    }

    pub fn levels(&self) -> &[BridgeLevels] {
        &self.levels[..self.len]
    }

    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        (0..self.len).map(move |k| {
            let end = if k + 1 < self.len { self.starts[k + 1] } else { 2.0 };
            Segment {
                start: self.starts[k] * self.half_period,
                end: end * self.half_period,
                levels: self.levels[k],
            }
        })
    }

    /// Bridge states at time `t` (seconds, any value; taken modulo the period).
    pub fn levels_at(&self, t: f64) -> BridgeLevels {
        let u = (t / self.half_period).rem_euclid(2.0);
        let k = self.starts[..self.len].partition_point(|&s| s <= u).max(1) - 1;
        self.levels[k]
    }

    /// Labelled switching edges with their wrapped times in half periods.
    pub fn edges(&self) -> &[(f64, Edge); 8] {
        &self.edges
    }
}

/// Exact periodic steady state for one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateSolution {
    pub schedule: SwitchingSchedule,
    currents: [f64; MAX_SEGMENTS + 1],
    /// Peak |i_L| over the period, in amperes.
    pub i_pk: f64,
    /// Average transferred power, in watts.
    pub p_avg: f64,
    /// Output voltage used for the solution.
    pub v2: f64,
}

impl SteadyStateSolution {
    /// Inductor current at each breakpoint.
    pub fn currents(&self) -> &[f64] {
        &self.currents[..self.schedule.len]
    }

    /// Current propagated across the whole period from `currents()[0]`.
    pub fn end_current(&self) -> f64 {
        self.currents[self.schedule.len]
    }

    /// Inductor current at time `t` (seconds, modulo the period).
    pub fn current_at(&self, t: f64) -> f64 {
        let s = &self.schedule;
        let u = (t / s.half_period).rem_euclid(2.0);
        let k = s.starts[..s.len].partition_point(|&b| b <= u).max(1) - 1;
        let end = if k + 1 < s.len { s.starts[k + 1] } else { 2.0 };
        let frac = (u - s.starts[k]) / (end - s.starts[k]);
        self.currents[k] + frac * (self.currents[k + 1] - self.currents[k])
    }

    /// Period-average of the inductor current.
    pub fn mean_current(&self) -> f64 {
        let s = &self.schedule;
        let mut area = 0.0;
        for k in 0..s.len {
            let end = if k + 1 < s.len { s.starts[k + 1] } else { 2.0 };
            area += 0.5 * (self.currents[k] + self.currents[k + 1]) * (end - s.starts[k]);
        }
        area / 2.0
    }
}

/// Integrate the inductor current segment by segment and remove the DC
/// offset. Returns currents at each breakpoint plus the wrapped end value.
fn integrate(
    params: &ConverterParams,
    v2: f64,
    s: &SwitchingSchedule,
) -> ([f64; MAX_SEGMENTS + 1], f64, f64) {
    let v1 = params.v1();
    let nv2 = params.n() * v2;
    let gain = s.half_period / params.l();

    let mut i = [0.0; MAX_SEGMENTS + 1];
    let mut area = 0.0;
    for k in 0..s.len {
        let end = if k + 1 < s.len { s.starts[k + 1] } else { 2.0 };
        let du = end - s.starts[k];
        let lv = s.levels[k];
        let v_l = v1 * f64::from(lv.primary) - nv2 * f64::from(lv.secondary);
        i[k + 1] = i[k] + v_l * gain * du;
        area += 0.5 * (i[k] + i[k + 1]) * du;
    }
    let mean = area / 2.0;

    let mut i_pk: f64 = 0.0;
    let mut p_area = 0.0;
    for v in &mut i[..=s.len] {
        *v -= mean;
    }
    for k in 0..s.len {
        let end = if k + 1 < s.len { s.starts[k + 1] } else { 2.0 };
        let du = end - s.starts[k];
        i_pk = i_pk.max(i[k].abs());
        p_area += f64::from(s.levels[k].primary) * 0.5 * (i[k] + i[k + 1]) * du;
    }
    (i, i_pk, v1 * p_area / 2.0)
}

pub fn solve_steady_state(
    params: &ConverterParams,
    v2: f64,
    m: &ModulationTriple,
) -> SteadyStateSolution {
    let schedule = synthesize_waveforms(params, m);
    let (currents, i_pk, p_avg) = integrate(params, v2, &schedule);
    SteadyStateSolution {
        schedule,
        currents,
        i_pk,
        p_avg,
        v2,
    }
}

/// `(i_pk, p_avg)` without building the full solution.
pub fn peak_and_power(params: &ConverterParams, v2: f64, d0: f64, d1: f64, d2: f64) -> (f64, f64) {
    let m = ModulationTriple { d0, d1, d2 };
    let schedule = synthesize_waveforms(params, &m);
    let (_, i_pk, p_avg) = integrate(params, v2, &schedule);
    (i_pk, p_avg)
}

fn power_at(params: &ConverterParams, v2: f64, d0: f64, d1: f64, d2: f64) -> f64 {
    peak_and_power(params, v2, d0, d1, d2).1
}

/// Single-phase-shift power `n V1 V2 d0 (1 - |d0|) / (2 fs L)`.
pub fn sps_power_closed_form(params: &ConverterParams, v2: f64, d0: f64) -> f64 {
    params.n() * params.v1() * v2 * d0 * (1.0 - d0.abs()) / (2.0 * params.fs() * params.l())
}

/// Largest average power reachable at fixed duties, and the `d0` reaching it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capability {
    pub power: f64,
    pub d0: f64,
}

pub fn max_power_capability(params: &ConverterParams, v2: f64, d1: f64, d2: f64) -> Capability {
    let step = 1.0 / (CAPABILITY_SCAN - 1) as f64;
    let mut best = Capability { power: f64::NEG_INFINITY, d0: 0.0 };
    let mut best_k = 0;
    for k in 0..CAPABILITY_SCAN {
        let d0 = k as f64 * step;
        let p = power_at(params, v2, d0, d1, d2);
        if p > best.power {
            best = Capability { power: p, d0 };
            best_k = k;
        }
    }
    if best.power <= 0.0 {
        return best;
    }

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut a = (best_k.saturating_sub(1)) as f64 * step;
    let mut b = ((best_k + 1).min(CAPABILITY_SCAN - 1)) as f64 * step;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = power_at(params, v2, x1, d1, d2);
    let mut f2 = power_at(params, v2, x2, d1, d2);
    while b - a > 1e-7 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = power_at(params, v2, x2, d1, d2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = power_at(params, v2, x1, d1, d2);
        }
    }
    let (d0, p) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    if p > best.power {
        best = Capability { power: p, d0 };
    }
    best
}

/// Power tolerance used when inverting `p_avg(d0)`.
pub fn power_tolerance(p_target: f64) -> f64 {
    (1e-6 * p_target).max(1e-3)
}

/// Find `d0` on the rising branch nearest zero that transfers `p_target`.
pub fn solve_d0_for_power(
    params: &ConverterParams,
    v2: f64,
    p_target: f64,
    d1: f64,
    d2: f64,
) -> Result<f64> {
    let cap = max_power_capability(params, v2, d1, d2);
    solve_d0_with_capability(params, v2, p_target, d1, d2, cap)
}

pub(crate) fn solve_d0_with_capability(
    params: &ConverterParams,
    v2: f64,
    p_target: f64,
    d1: f64,
    d2: f64,
    cap: Capability,
) -> Result<f64> {
    let tol = power_tolerance(p_target);
    if p_target > cap.power + tol || !(p_target >= 0.0) {
        return Err(Error::Infeasible {
            target: p_target,
            capability: cap.power,
            d1,
            d2,
        });
    }

    // Scan [-1, 0] and [0, d0_max] with d0 = 0 and d0_max as exact nodes.
    let mut nodes = Vec::with_capacity(INVERSION_SCAN_NEG + INVERSION_SCAN_POS + 1);
    for k in 0..INVERSION_SCAN_NEG {
        nodes.push(-1.0 + k as f64 / INVERSION_SCAN_NEG as f64);
    }
    for k in 0..=INVERSION_SCAN_POS {
        nodes.push(cap.d0 * k as f64 / INVERSION_SCAN_POS as f64);
    }
    let values: Vec<f64> = nodes.iter().map(|&d0| power_at(params, v2, d0, d1, d2)).collect();

    // Exact hits and rising crossings, keep the one closest to d0 = 0.
    let mut best: Option<(f64, f64, f64)> = None; // (distance, lo, hi)
    let mut consider = |dist: f64, lo: f64, hi: f64| {
        // Exact hits win ties against crossing intervals.
        if best.is_none_or(|b| dist < b.0 || (dist == b.0 && lo == hi && b.1 != b.2)) {
            best = Some((dist, lo, hi));
        }
    };
    for (k, (&d0, &p)) in nodes.iter().zip(&values).enumerate() {
        if (p - p_target).abs() <= tol {
            consider(d0.abs(), d0, d0);
        }
        if k + 1 < nodes.len() {
            let (d_hi, p_hi) = (nodes[k + 1], values[k + 1]);
            if p < p_target && p_hi >= p_target {
                let dist = if d0 <= 0.0 && d_hi >= 0.0 { 0.0 } else { d0.abs().min(d_hi.abs()) };
                consider(dist, d0, d_hi);
            }
        }
    }
    let Some((_, mut lo, mut hi)) = best else {
        // Target sits within tolerance above a capability the scan did not resolve.
        return Ok(cap.d0);
    };
    if lo == hi {
        return Ok(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p = power_at(params, v2, mid, d1, d2);
        if (p - p_target).abs() <= tol {
            return Ok(mid);
        }
        if p < p_target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Result of brute-force time marching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    pub i_pk: f64,
    pub p_avg: f64,
}

/// Number of periods marched by [`dense_integration_oracle`].
pub const ORACLE_PERIODS: usize = 50;

/// Independent check of [`solve_steady_state`]: fixed-step forward time
/// marching of `di/dt = (vp - n vs) / L` from rest over [`ORACLE_PERIODS`]
/// periods. Switching instants falling inside a step are located and the
/// step is split there, so bridge voltages are sampled only on intervals
/// where they are constant. Peak and power come from the final period after
/// removing the DC offset.
pub fn dense_integration_oracle(
    params: &ConverterParams,
    v2: f64,
    m: &ModulationTriple,
    steps_per_period: usize,
) -> OracleResult {
    assert!(steps_per_period >= 1000, "dense oracle needs at least 1000 steps per period");
    let v1 = params.v1();
    let nv2 = params.n() * v2;
    let gain = params.half_period() / params.l();
    let (d1, d2) = (m.d1, m.d2);
    let sec = m.d0 + 0.5 * (m.d1 - m.d2);

    let gate = |u: f64, start: f64, width: f64| -> f64 {
        let pos = mod2(u - start) < width;
        let neg = mod2(u - start - 1.0) < width;
        f64::from(u8::from(pos)) - f64::from(u8::from(neg))
    };
    let mut switching = [0.0, d1, 1.0, 1.0 + d1, sec, sec + d2, sec + 1.0, sec + 1.0 + d2].map(mod2);
    switching.sort_unstable_by(f64::total_cmp);

    struct Tally {
        i: f64,
        area_i: f64,
        area_vi: f64,
        area_v: f64,
        max: f64,
        min: f64,
    }
    let mut st = Tally {
        i: 0.0,
        area_i: 0.0,
        area_vi: 0.0,
        area_v: 0.0,
        max: f64::NEG_INFINITY,
        min: f64::INFINITY,
    };
    let advance = |st: &mut Tally, a: f64, b: f64, record: bool| {
        let mid = 0.5 * (a + b);
        let vp = v1 * gate(mid, 0.0, d1);
        let vs = nv2 * gate(mid, sec, d2);
        let next = st.i + (vp - vs) * gain * (b - a);
        if record {
            let avg = 0.5 * (st.i + next) * (b - a);
            st.area_i += avg;
            st.area_vi += vp * avg;
            st.area_v += vp * (b - a);
            st.max = st.max.max(next);
            st.min = st.min.min(next);
        }
        st.i = next;
    };

    let du = 2.0 / steps_per_period as f64;
    for period in 0..ORACLE_PERIODS {
        let record = period + 1 == ORACLE_PERIODS;
        if record {
            st.max = st.i;
            st.min = st.i;
        }
        let mut next_edge = 0;
        for k in 0..steps_per_period {
            let a = k as f64 * du;
            let b = if k + 1 == steps_per_period { 2.0 } else { (k + 1) as f64 * du };
            let mut t = a;
            while next_edge < switching.len() && switching[next_edge] < b {
                if switching[next_edge] > t {
                    advance(&mut st, t, switching[next_edge], record);
                    t = switching[next_edge];
                }
                next_edge += 1;
            }
            advance(&mut st, t, b, record);
        }
    }
    let mean = st.area_i / 2.0;
    OracleResult {
        i_pk: (st.max - mean).max(mean - st.min),
        p_avg: (st.area_vi - mean * st.area_v) / 2.0,
    }
}

/// Structural label of a switching pattern: the order of the eight edges
/// around the period, starting from the primary positive rise. Coincident
/// edges are joined with `=` in fixed priority order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeSignature(String);

impl ModeSignature {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn classify_mode(schedule: &SwitchingSchedule) -> ModeSignature {
    let mut edges = schedule.edges;
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Snap each edge onto the start of its coincidence group, then order by
    // (group, priority).
    let mut anchor = edges[0].0;
    for e in &mut edges {
        if e.0 - anchor > EDGE_TOL {
            anchor = e.0;
        }
        e.0 = anchor;
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut token = String::new();
    for (k, (t, e)) in edges.iter().enumerate() {
        if k > 0 {
            token.push(if *t == edges[k - 1].0 { '=' } else { ' ' });
        }
        token.push_str(e.token());
    }
    ModeSignature(token)
}
