//! Current stress of the three modulation strategies, always evaluated with
//! the exact steady-state solver.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::converter::{max_power_capability, peak_and_power, solve_d0_with_capability, ConverterParams};
use crate::error::{Error, Result};
use crate::fis::{evaluate_fis, lut_lookup, LutBaseline, TsFis};
use crate::pso::{Objective, PENALTY};
use crate::textio::{fmt_f64, write_file};

pub const COMPARISON_HEADER: &str = "p_w,v2_v,strategy,d0,d1,d2,i_pk_a";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Single phase shift, `d1 = d2 = 1`.
    Spsm,
    /// Nearest stored optimum.
    LutTpsm,
    /// Fuzzy modulator.
    AiTpsm,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Spsm, Strategy::LutTpsm, Strategy::AiTpsm];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Spsm => "SPSM",
            Strategy::LutTpsm => "LUT-TPSM",
            Strategy::AiTpsm => "AI-TPSM",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}")))
    }
}

/// One strategy at one operating point. `d0` and `i_pk` are NaN when the
/// commanded `(d1, d2)` cannot deliver the power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub p: f64,
    pub v2: f64,
    pub strategy: Strategy,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub i_pk: f64,
}

impl ComparisonRow {
    pub fn feasible(&self) -> bool {
        self.i_pk.is_finite()
    }
}

/// Exact current stress for `(d1, d2)` with `d0` solved for the power.
pub fn exact_current_stress(params: &ConverterParams, p: f64, v2: f64, d1: f64, d2: f64) -> Option<(f64, f64)> {
    let cap = max_power_capability(params, v2, d1, d2);
    let d0 = solve_d0_with_capability(params, v2, p, d1, d2, cap).ok()?;
    Some((d0, peak_and_power(params, v2, d0, d1, d2).0))
}

pub fn evaluate_strategy(params: &ConverterParams, p: f64, v2: f64, strategy: Strategy, d1: f64, d2: f64) -> ComparisonRow {
    let (d0, i_pk) = exact_current_stress(params, p, v2, d1, d2).unwrap_or((f64::NAN, f64::NAN));
    ComparisonRow { p, v2, strategy, d0, d1, d2, i_pk }
}

/// Rows for every point, strategies in [`Strategy::ALL`] order.
pub fn compare_sweep(
    params: &ConverterParams,
    fis: &TsFis,
    lut: &LutBaseline,
    points: &[(f64, f64)],
) -> Vec<ComparisonRow> {
    points
        .par_iter()
        .flat_map_iter(|&(p, v2)| {
            let (l1, l2) = lut_lookup(lut, p, v2);
            let (a1, a2) = evaluate_fis(fis, p, v2);
            [
                evaluate_strategy(params, p, v2, Strategy::Spsm, 1.0, 1.0),
                evaluate_strategy(params, p, v2, Strategy::LutTpsm, l1, l2),
                evaluate_strategy(params, p, v2, Strategy::AiTpsm, a1, a2),
            ]
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let line = format!(
            "{},{},{},{},{},{},{}\n",
            fmt_f64(r.p),
            fmt_f64(r.v2),
            r.strategy,
            fmt_f64(r.d0),
            fmt_f64(r.d1),
            fmt_f64(r.d2),
            fmt_f64(r.i_pk)
        );
        s.push_str(&line);
    }
    s
}

pub fn write_comparison(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    write_file(path, comparison_csv(rows).as_bytes())
}

/// True current stress as a swarm/lattice objective, with the same
/// capability-gap penalty the surrogate objective uses.
#[derive(Debug, Clone, Copy)]
pub struct ExactObjective<'a> {
    pub params: &'a ConverterParams,
    pub p: f64,
    pub v2: f64,
}

impl Objective for ExactObjective<'_> {
    fn eval(&self, d1: f64, d2: f64) -> f64 {
        let cap = max_power_capability(self.params, self.v2, d1, d2);
        if cap.power < self.p {
            return PENALTY + (self.p - cap.power);
        }
        match solve_d0_with_capability(self.params, self.v2, self.p, d1, d2, cap) {
            Ok(d0) => peak_and_power(self.params, self.v2, d0, d1, d2).0,
            Err(_) => PENALTY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fis::{FisRanges, N_RULES};
    use crate::pso::{brute_force_reference, OptimalPoint, OptimalSurface};

    #[test]
    fn labels_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("TPSM".parse::<Strategy>().is_err());
    }

    #[test]
    fn single_phase_shift_row_matches_closed_form() {
        let params = ConverterParams::design_case();
        let r = evaluate_strategy(&params, 1000.0, 200.0, Strategy::Spsm, 1.0, 1.0);
        assert!((r.d0 - (1.0 - 0.44f64.sqrt()) / 2.0).abs() < 1e-6);
        assert!((r.i_pk - 6.012).abs() < 2e-3, "{r:?}");
    }

    #[test]
    fn infeasible_strategy_is_nan() {
        let params = ConverterParams::design_case();
        let r = evaluate_strategy(&params, 1000.0, 200.0, Strategy::LutTpsm, 0.05, 0.05);
        assert!(!r.feasible() && r.d0.is_nan());
    }

    #[test]
    fn sweep_layout_and_csv() {
        let params = ConverterParams::design_case();
        let ranges = FisRanges::from_params(&params);
        let fis = TsFis::new(ranges, [[[1.0, 0.0, 0.0]; 2]; N_RULES]).unwrap();
        let surface = OptimalSurface {
            points: vec![OptimalPoint { p: 500.0, v2: 200.0, d1: 1.0, d2: 1.0, i_pk: 3.0 }],
        };
        let lut = LutBaseline::new(surface, ranges).unwrap();
        let rows = compare_sweep(&params, &fis, &lut, &[(500.0, 200.0), (800.0, 180.0)]);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.strategy).collect::<Vec<_>>()[..3], Strategy::ALL);
        // All three command single phase shift here.
        assert_eq!(rows[0].i_pk, rows[1].i_pk);
        assert!((rows[0].i_pk - rows[2].i_pk).abs() < 1e-9);
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with("p_w,v2_v,strategy,d0,d1,d2,i_pk_a\n"));
        assert_eq!(csv.lines().nth(2).unwrap().split(',').nth(2), Some("LUT-TPSM"));
    }

    #[test]
    fn rated_lattice_optimum_is_single_phase_shift() {
        let params = ConverterParams::design_case();
        let obj = ExactObjective { params: &params, p: 1000.0, v2: 200.0 };
        let (d1, d2, v) = brute_force_reference(&obj, 21);
        assert_eq!((d1, d2), (1.0, 1.0));
        assert!((v - 6.012).abs() < 2e-3);
    }
}
