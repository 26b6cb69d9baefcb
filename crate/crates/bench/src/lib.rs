//! Shared fixtures for the benchmarks.

use dab_tps::fis::{FisRanges, TsFis, N_RULES};
use dab_tps::surrogate::{MinMax, MlpModel, LAYER_DIMS};
use dab_tps::ConverterParams;

pub fn params() -> ConverterParams {
    ConverterParams::design_case()
}

/// Untrained surrogate with the production layer sizes.
pub fn model() -> MlpModel {
    let p = params();
    let norms = vec![
        MinMax::new(p.p_min(), p.p_max()).unwrap(),
        MinMax::new(p.v2_min(), p.v2_max()).unwrap(),
        MinMax::new(0.0, 1.0).unwrap(),
        MinMax::new(0.0, 1.0).unwrap(),
    ];
    MlpModel::new(&LAYER_DIMS, norms, MinMax::new(0.5, 20.0).unwrap(), 1).unwrap()
}

/// Fuzzy modulator with distinct affine consequents.
pub fn fis() -> TsFis {
    let mut rules = [[[0.0; 3]; 2]; N_RULES];
    for (r, rule) in rules.iter_mut().enumerate() {
        let k = r as f64 / N_RULES as f64;
        *rule = [[0.5 + 0.1 * k, 0.2, -0.1], [0.7 - 0.1 * k, 0.1, 0.05]];
    }
    TsFis::new(FisRanges::from_params(&params()), rules).unwrap()
}
