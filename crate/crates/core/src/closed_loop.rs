//! Switched time-domain simulation of the converter feeding an RC load, with
//! a PI regulator on `d0` and the fuzzy modulator commanding `(d1, d2)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::converter::{
    solve_d0_for_power, solve_steady_state, synthesize_waveforms, BridgeLevels, ConverterParams, ModulationTriple,
};
use crate::error::{Error, Result};
use crate::fis::{evaluate_fis, TsFis};
use crate::textio::{fmt_f64, read_file, write_file};

pub const TRACE_HEADER: &str = "t_s,v2_v,io_a,p_w,d0,d1,d2,ipk_cycle_a";

/// PI regulator with clamped output; the integrator holds while the output
/// is saturated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiState {
    pub kp: f64,
    pub ki: f64,
    pub integrator: f64,
    pub out_min: f64,
    pub out_max: f64,
    pub saturated: bool,
}

impl PiState {
    pub fn new(kp: f64, ki: f64, integrator: f64) -> Self {
        Self {
            kp,
            ki,
            integrator,
            out_min: -1.0,
            out_max: 1.0,
            saturated: false,
        }
    }
}

pub fn pi_step(state: &mut PiState, error: f64, dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    let increment = state.ki * error * dt;
    let candidate = state.kp * error + state.integrator + increment;
    if candidate > state.out_max || candidate < state.out_min {
        state.saturated = true;
        candidate.clamp(state.out_min, state.out_max)
    } else {
        state.saturated = false;
        state.integrator += increment;
        candidate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub t: f64,
    pub i_l: f64,
    pub v_c: f64,
    pub c_out: f64,
    pub r_load: f64,
}

/// One explicit Euler step of the inductor current and capacitor voltage.
pub fn plant_step(plant: &mut PlantState, params: &ConverterParams, levels: BridgeLevels, dt: f64) {
    let vp = params.v1() * f64::from(levels.primary);
    let s2 = f64::from(levels.secondary);
    let di = (vp - params.n() * plant.v_c * s2) / params.l();
    let dv = (params.n() * s2 * plant.i_l - plant.v_c / plant.r_load) / plant.c_out;
    plant.i_l += di * dt;
    plant.v_c += dv * dt;
    plant.t += dt;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub c_out: f64,
    pub kp: f64,
    pub ki: f64,
    pub substeps_per_period: usize,
    /// Time constant of the low-pass filter on measured power.
    pub power_filter_tau: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            c_out: 470e-6,
            kp: 0.004,
            ki: 4.0,
            substeps_per_period: 2000,
            power_filter_tau: 2e-3,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_out > 0.0 && self.power_filter_tau > 0.0 && self.kp >= 0.0 && self.ki >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad loop configuration {self:?}")));
        }
        if self.substeps_per_period < 1000 {
            return Err(Error::InvalidConfig("need at least 1000 substeps per period".into()));
        }
        Ok(())
    }
}

/// Reference or load change at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopEvent {
    pub t: f64,
    #[serde(default)]
    pub v2_ref: Option<f64>,
    #[serde(default)]
    pub r_load: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopScenario {
    pub name: String,
    pub v2_ref: f64,
    pub r_load: f64,
    pub duration: f64,
    #[serde(default)]
    pub events: Vec<LoopEvent>,
    #[serde(default)]
    pub control: LoopConfig,
}

impl LoopScenario {
    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        if !(self.v2_ref > 0.0 && self.r_load > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidConfig(format!("scenario {:?}: non-positive initial values", self.name)));
        }
        let mut last = 0.0;
        for e in &self.events {
            if !(e.t >= last && e.t <= self.duration) {
                return Err(Error::InvalidConfig(format!(
                    "scenario {:?}: events must be time-ordered within the duration",
                    self.name
                )));
            }
            if e.v2_ref.is_none() && e.r_load.is_none() {
                return Err(Error::InvalidConfig(format!("scenario {:?}: event at {} changes nothing", self.name, e.t)));
            }
            if e.v2_ref.is_some_and(|v| !(v > 0.0)) || e.r_load.is_some_and(|r| !(r > 0.0)) {
                return Err(Error::InvalidConfig(format!("scenario {:?}: non-positive event value", self.name)));
            }
            last = e.t;
        }
        Ok(())
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |sp| text[..sp.start].lines().count().max(1));
            Error::parse(path, line, e.message().to_owned())
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Reference step at fixed load.
    pub fn reference_step(name: &str, from: f64, to: f64, r_load: f64, t_step: f64, duration: f64) -> Self {
        Self {
            name: name.to_owned(),
            v2_ref: from,
            r_load,
            duration,
            events: vec![LoopEvent { t: t_step, v2_ref: Some(to), r_load: None }],
            control: LoopConfig::default(),
        }
    }

    /// Load step at fixed reference.
    pub fn load_step(name: &str, v2_ref: f64, from: f64, to: f64, t_step: f64, duration: f64) -> Self {
        Self {
            name: name.to_owned(),
            v2_ref,
            r_load: from,
            duration,
            events: vec![LoopEvent { t: t_step, v2_ref: None, r_load: Some(to) }],
            control: LoopConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// End of the switching period.
    pub t: f64,
    pub v2: f64,
    /// Period average of the secondary bridge output current.
    pub i_o: f64,
    /// Period average of the power delivered by the secondary bridge.
    pub p: f64,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub i_pk: f64,
}

/// Energy bookkeeping over one switching period, in joules.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyAudit {
    pub input: f64,
    pub load: f64,
    pub capacitor: f64,
    pub inductor: f64,
}

impl EnergyAudit {
    /// `(input - load - capacitor change) / input`.
    pub fn relative_residual(&self) -> f64 {
        (self.input - self.load - self.capacitor) / self.input
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoopTrace {
    pub rows: Vec<TraceRow>,
    pub audits: Vec<EnergyAudit>,
    /// References in force during each row's period.
    pub references: Vec<(f64, f64)>,
}

impl LoopTrace {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRACE_HEADER}\n");
        for r in &self.rows {
            s.push_str(&[r.t, r.v2, r.i_o, r.p, r.d0, r.d1, r.d2, r.i_pk].map(fmt_f64).join(","));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

struct PeriodResult {
    i_o: f64,
    p: f64,
    i_pk: f64,
    audit: EnergyAudit,
}

/// Integrates one switching period with at most `substeps` Euler steps,
/// split so that no step straddles a switching edge.
fn run_period(plant: &mut PlantState, params: &ConverterParams, m: &ModulationTriple, substeps: usize) -> PeriodResult {
    let schedule = synthesize_waveforms(params, m);
    let period = schedule.period();
    let h_max = period / substeps as f64;
    let (v0, i0) = (plant.v_c, plant.i_l);
    let t0 = plant.t;
    let n = params.n();
    let (mut q_o, mut e_o, mut e_in, mut e_load) = (0.0, 0.0, 0.0, 0.0);
    let mut i_pk = plant.i_l.abs();
    for seg in schedule.segments() {
        let len = seg.end - seg.start;
        let steps = (len / h_max).ceil().max(1.0) as usize;
        let h = len / steps as f64;
        let (s1, s2) = (f64::from(seg.levels.primary), f64::from(seg.levels.secondary));
        for _ in 0..steps {
            q_o += n * s2 * plant.i_l * h;
            e_o += plant.v_c * n * s2 * plant.i_l * h;
            e_in += params.v1() * s1 * plant.i_l * h;
            e_load += plant.v_c * plant.v_c / plant.r_load * h;
            plant_step(plant, params, seg.levels, h);
            i_pk = i_pk.max(plant.i_l.abs());
        }
    }
    plant.t = t0 + period;
    PeriodResult {
        i_o: q_o / period,
        p: e_o / period,
        i_pk,
        audit: EnergyAudit {
            input: e_in,
            load: e_load,
            capacitor: 0.5 * plant.c_out * (plant.v_c * plant.v_c - v0 * v0),
            inductor: 0.5 * params.l() * (plant.i_l * plant.i_l - i0 * i0),
        },
    }
}

/// Modulator command for a measured power. The measurement is held inside
/// the fuzzy input range, so reversed or overshooting power during
/// transients never reaches the extrapolated part of the rule base.
pub fn fis_command(fis: &TsFis, p_measured: f64, v2_ref: f64) -> (f64, f64) {
    let r = &fis.ranges;
    evaluate_fis(fis, p_measured.clamp(r.p_min, r.p_max), v2_ref)
}

/// Runs the scenario, returning the trace so far together with the error if
/// the output voltage runs away.
pub fn simulate(scenario: &LoopScenario, fis: &TsFis, params: &ConverterParams) -> (LoopTrace, Option<Error>) {
    let mut trace = LoopTrace::default();
    if let Err(e) = scenario.validate() {
        return (trace, Some(e));
    }
    let cfg = &scenario.control;
    let period = 2.0 * params.half_period();

    // Start from the converter's own steady state at the initial operating point.
    let mut v2_ref = scenario.v2_ref;
    let mut r_load = scenario.r_load;
    let p0 = v2_ref * v2_ref / r_load;
    let (d1, d2) = fis_command(fis, p0, v2_ref);
    let d0 = match solve_d0_for_power(params, v2_ref, p0, d1, d2) {
        Ok(d0) => d0,
        Err(e) => return (trace, Some(e)),
    };
    let start = match ModulationTriple::new(d0, d1, d2) {
        Ok(m) => solve_steady_state(params, v2_ref, &m),
        Err(e) => return (trace, Some(e)),
    };
    let mut plant = PlantState {
        t: 0.0,
        i_l: start.current_at(0.0),
        v_c: v2_ref,
        c_out: cfg.c_out,
        r_load,
    };
    let mut pi = PiState::new(cfg.kp, cfg.ki, d0);
    let mut p_filtered = p0;
    let alpha = 1.0 - (-period / cfg.power_filter_tau).exp();
    let mut events = scenario.events.iter().peekable();

    let n_periods = (scenario.duration / period).round() as usize;
    for k in 0..n_periods {
        let t_start = k as f64 * period;
        while let Some(e) = events.next_if(|e| e.t <= t_start + 0.5 * period) {
            v2_ref = e.v2_ref.unwrap_or(v2_ref);
            r_load = e.r_load.unwrap_or(r_load);
        }
        plant.r_load = r_load;
        plant.t = t_start;

        let d0 = pi_step(&mut pi, v2_ref - plant.v_c, period);
        let (d1, d2) = fis_command(fis, p_filtered, v2_ref);
        let m = match ModulationTriple::new(d0, d1, d2) {
            Ok(m) => m,
            Err(e) => return (trace, Some(e)),
        };
        let res = run_period(&mut plant, params, &m, cfg.substeps_per_period);
        p_filtered += alpha * (res.p - p_filtered);

        trace.rows.push(TraceRow {
            t: t_start + period,
            v2: plant.v_c,
            i_o: res.i_o,
            p: res.p,
            d0,
            d1,
            d2,
            i_pk: res.i_pk,
        });
        trace.audits.push(res.audit);
        trace.references.push((v2_ref, r_load));

        if !plant.v_c.is_finite() || plant.v_c.abs() > 2.0 * params.v2_max() {
            let err = Error::Diverged { t: plant.t, v2: plant.v_c };
            return (trace, Some(err));
        }
    }
    (trace, None)
}

pub fn run_scenario(scenario: &LoopScenario, fis: &TsFis, params: &ConverterParams) -> Result<LoopTrace> {
    match simulate(scenario, fis, params) {
        (trace, None) => Ok(trace),
        (_, Some(e)) => Err(e),
    }
}

/// Time after `t_event` from which `v2` stays within `band` (fraction) of
/// `v2_ref` until `t_end`; `None` if it never settles.
pub fn settling_time(trace: &LoopTrace, t_event: f64, t_end: f64, band: f64) -> Option<f64> {
    let window: Vec<(&TraceRow, f64)> = trace
        .rows
        .iter()
        .zip(&trace.references)
        .filter(|(r, _)| r.t > t_event && r.t <= t_end)
        .map(|(r, &(v, _))| (r, v))
        .collect();
    let last_out = window.iter().rposition(|(r, v)| (r.v2 - v).abs() > band * v);
    match last_out {
        None => window.first().map(|_| 0.0),
        Some(i) if i + 1 < window.len() => Some(window[i].0.t - t_event),
        Some(_) => None,
    }
}

/// Mean of `p` over rows with `t` in `(from, to]`.
pub fn mean_power(trace: &LoopTrace, from: f64, to: f64) -> f64 {
    let ps: Vec<f64> = trace.rows.iter().filter(|r| r.t > from && r.t <= to).map(|r| r.p).collect();
    ps.iter().sum::<f64>() / ps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fis::{Consequent, N_RULES};

    #[test]
    fn pi_zero_error_holds() {
        let mut pi = PiState::new(0.3, 7.0, 0.25);
        assert_eq!(pi_step(&mut pi, 0.0, 1e-3), 0.25);
        assert_eq!(pi.integrator, 0.25);
    }

    #[test]
    fn pi_hand_case() {
        let mut pi = PiState::new(0.01, 0.0, 0.10);
        assert!((pi_step(&mut pi, 5.0, 5e-5) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn pi_saturates_and_freezes() {
        let mut pi = PiState::new(0.01, 4.0, 0.3);
        assert_eq!(pi_step(&mut pi, 1e6, 5e-5), 1.0);
        assert!(pi.saturated);
        assert_eq!(pi.integrator, 0.3);
        assert_eq!(pi_step(&mut pi, -1e6, 5e-5), -1.0);
        assert_eq!(pi.integrator, 0.3);
    }

    #[test]
    fn idle_secondary_discharges_capacitor() {
        let params = ConverterParams::design_case();
        let mut plant = PlantState { t: 0.0, i_l: 3.0, v_c: 200.0, c_out: 470e-6, r_load: 40.0 };
        let tau = 40.0 * 470e-6;
        let dt = tau / 1e5;
        for _ in 0..100_000 {
            plant_step(&mut plant, &params, BridgeLevels { primary: 0, secondary: 0 }, dt);
        }
        assert!((plant.v_c - 200.0 * (-1.0f64).exp()).abs() < 200.0 * 1e-4, "{}", plant.v_c);
        assert_eq!(plant.i_l, 3.0);
    }

    fn flat_fis(d1: f64, d2: f64) -> TsFis {
        let rules: [[Consequent; 2]; N_RULES] = [[[d1, 0.0, 0.0], [d2, 0.0, 0.0]]; N_RULES];
        TsFis::new(crate::fis::FisRanges::from_params(&ConverterParams::design_case()), rules).unwrap()
    }

    #[test]
    fn command_holds_power_inside_fuzzy_range() {
        let ranges = crate::fis::FisRanges::from_params(&ConverterParams::design_case());
        let fis = TsFis::new(ranges, [[[0.2, 1.0, 0.0], [0.2, 1.0, 0.0]]; N_RULES]).unwrap();
        assert_eq!(evaluate_fis(&fis, -500.0, 160.0), (0.0, 0.0));
        assert_eq!(fis_command(&fis, -500.0, 160.0), evaluate_fis(&fis, 100.0, 160.0));
        assert_eq!(fis_command(&fis, 5000.0, 160.0), evaluate_fis(&fis, 1000.0, 160.0));
        assert_eq!(fis_command(&fis, 420.0, 160.0), evaluate_fis(&fis, 420.0, 160.0));
    }

    #[test]
    fn rated_point_holds_steady_state() {
        let params = ConverterParams::design_case();
        let fis = flat_fis(1.0, 1.0);
        let sc = LoopScenario {
            name: "hold".into(),
            v2_ref: 200.0,
            r_load: 40.0,
            duration: 0.01,
            events: vec![],
            control: LoopConfig::default(),
        };
        let trace = run_scenario(&sc, &fis, &params).unwrap();
        assert_eq!(trace.rows.len(), 200);
        let last = trace.rows.last().unwrap();
        assert!((last.v2 - 200.0).abs() < 1.0, "{last:?}");
        let exact = solve_steady_state(&params, 200.0, &ModulationTriple::sps(last.d0).unwrap());
        assert!((last.i_pk - exact.i_pk).abs() < 0.03 * exact.i_pk);
        assert!((mean_power(&trace, 0.005, 0.01) - 1000.0).abs() < 30.0);
        for a in &trace.audits[100..] {
            assert!(a.relative_residual().abs() < 5e-3, "{a:?}");
        }
        assert!(trace.rows.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn scenario_toml_round_trip() {
        let sc = LoopScenario::reference_step("down", 200.0, 160.0, 40.0, 0.02, 0.1);
        let text = sc.to_toml();
        assert_eq!(LoopScenario::from_toml(&text, Path::new("s.toml")).unwrap(), sc);
        let bad = LoopScenario { events: vec![LoopEvent { t: 0.5, v2_ref: Some(1.0), r_load: None }], ..sc };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn runaway_is_reported_with_partial_trace() {
        let params = ConverterParams::design_case();
        let fis = flat_fis(1.0, 1.0);
        let mut sc = LoopScenario::load_step("open", 200.0, 40.0, 1e9, 0.001, 0.2);
        sc.control.ki = 0.0;
        sc.control.kp = 0.0;
        let (trace, err) = simulate(&sc, &fis, &params);
        assert!(matches!(err, Some(Error::Diverged { .. })), "{err:?}");
        assert!(!trace.rows.is_empty());
    }
}
