//! First-order Takagi–Sugeno fuzzy modulator `(P, V2) -> (D1, D2)` and the
//! nearest-neighbour lookup table it replaces.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::converter::ConverterParams;
use crate::error::{Error, Result};
use crate::pso::{OptimalPoint, OptimalSurface};
use crate::textio::{fmt_f64, parse_f64, read_file, write_file};

const FIS_TAG: &str = "dab-tps-fis";
const FIS_VERSION: u32 = 1;
pub const N_RULES: usize = 9;
/// Pivots of the triangular factor below this fraction of the largest one
/// are treated as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMf {
    pub center: f64,
    pub sigma: f64,
}

pub fn gaussian_mf(x: f64, mf: GaussianMf) -> f64 {
    (-log_membership(x, mf)).exp()
}

/// `-ln(mu(x))`.
fn log_membership(x: f64, mf: GaussianMf) -> f64 {
    // Bounded so that z^2 stays finite for any finite input.
    let z = ((x - mf.center) / mf.sigma).clamp(-1e150, 1e150);
    0.5 * z * z
}

/// Input ranges that place the antecedents and normalize the consequents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisRanges {
    pub p_min: f64,
    pub p_max: f64,
    pub v2_min: f64,
    pub v2_max: f64,
}

impl FisRanges {
    pub fn from_params(params: &ConverterParams) -> Self {
        Self {
            p_min: params.p_min(),
            p_max: params.p_max(),
            v2_min: params.v2_min(),
            v2_max: params.v2_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && hi > lo;
        if !ok(self.p_min, self.p_max) || !ok(self.v2_min, self.v2_max) {
            return Err(Error::InvalidConfig(format!("degenerate FIS ranges {self:?}")));
        }
        Ok(())
    }

    pub fn normalize(&self, p: f64, v2: f64) -> (f64, f64) {
        (
            (p - self.p_min) / (self.p_max - self.p_min),
            (v2 - self.v2_min) / (self.v2_max - self.v2_min),
        )
    }

    /// Low, medium and high sets: centres at min, midpoint and max, width a
    /// quarter of the range.
    fn mfs(lo: f64, hi: f64) -> [GaussianMf; 3] {
        let sigma = (hi - lo) / 4.0;
        [lo, 0.5 * (lo + hi), hi].map(|center| GaussianMf { center, sigma })
    }
}

/// Affine consequent `a + b * p_norm + c * v2_norm`.
pub type Consequent = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TsFis {
    pub ranges: FisRanges,
    pub p_mfs: [GaussianMf; 3],
    pub v2_mfs: [GaussianMf; 3],
    /// Rule `3 * i + j` pairs the i-th power set with the j-th voltage set;
    /// one consequent per output channel.
    pub rules: [[Consequent; 2]; N_RULES],
}

/// Firing-strength weighted mean of rule outputs.
pub fn defuzzify(weights: &[f64], outputs: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    weights.iter().zip(outputs).map(|(w, o)| w * o).sum::<f64>() / total
}

impl TsFis {
    pub fn new(ranges: FisRanges, rules: [[Consequent; 2]; N_RULES]) -> Result<Self> {
        ranges.validate()?;
        Ok(Self {
            ranges,
            p_mfs: FisRanges::mfs(ranges.p_min, ranges.p_max),
            v2_mfs: FisRanges::mfs(ranges.v2_min, ranges.v2_max),
            rules,
        })
    }

    /// Product firing strengths divided by their sum. Computed relative to
    /// the strongest rule, so the sum is at least one for any finite input.
    pub fn normalized_weights(&self, p: f64, v2: f64) -> [f64; N_RULES] {
        let lp = self.p_mfs.map(|mf| log_membership(p, mf));
        let lv = self.v2_mfs.map(|mf| log_membership(v2, mf));
        let (mp, mv) = (lp.iter().copied().fold(f64::INFINITY, f64::min), lv.iter().copied().fold(f64::INFINITY, f64::min));
        let mut w = [0.0; N_RULES];
        for i in 0..3 {
            for j in 0..3 {
                w[3 * i + j] = (-((lp[i] - mp) + (lv[j] - mv))).exp();
            }
        }
        let total: f64 = w.iter().sum();
        w.map(|x| x / total)
    }

    /// Defuzzified outputs before clamping.
    pub fn evaluate_raw(&self, p: f64, v2: f64) -> [f64; 2] {
        let w = self.normalized_weights(p, v2);
        let (pn, vn) = self.ranges.normalize(p, v2);
        let mut out = [0.0; 2];
        for (r, rule) in self.rules.iter().enumerate() {
            for (k, c) in rule.iter().enumerate() {
                out[k] += w[r] * (c[0] + c[1] * pn + c[2] * vn);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let r = &self.ranges;
        let mut s = format!("{FIS_TAG} {FIS_VERSION}\n");
        let _ = writeln!(s, "p_range {} {}", fmt_f64(r.p_min), fmt_f64(r.p_max));
        let _ = writeln!(s, "v2_range {} {}", fmt_f64(r.v2_min), fmt_f64(r.v2_max));
        for (name, mfs) in [("mf_p", &self.p_mfs), ("mf_v2", &self.v2_mfs)] {
            for mf in mfs {
                let _ = writeln!(s, "{name} {} {}", fmt_f64(mf.center), fmt_f64(mf.sigma));
            }
        }
        for (k, rule) in self.rules.iter().enumerate() {
            let coeffs: Vec<String> = rule.iter().flatten().copied().map(fmt_f64).collect();
            let _ = writeln!(s, "rule {} {} {}", k / 3, k % 3, coeffs.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
            .filter(|(_, f)| !f.is_empty());
        let mut next = |key: &str, n: usize| -> Result<(usize, Vec<f64>)> {
            let (line, f) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {key}")))?;
            if f[0] != key || f.len() != n + 1 {
                return Err(Error::parse(path, line, format!("expected {key} with {n} values")));
            }
            let v = f[1..].iter().map(|x| parse_f64(x, path, line)).collect::<Result<Vec<_>>>()?;
            Ok((line, v))
        };
        let (line, v) = next(FIS_TAG, 1)?;
        if v[0] != f64::from(FIS_VERSION) {
            return Err(Error::parse(path, line, format!("unsupported FIS version {}", v[0])));
        }
        let (_, p) = next("p_range", 2)?;
        let (line, v2) = next("v2_range", 2)?;
        let ranges = FisRanges { p_min: p[0], p_max: p[1], v2_min: v2[0], v2_max: v2[1] };
        ranges.validate().map_err(|e| Error::parse(path, line, e.to_string()))?;
        let mut mfs = Vec::new();
        for key in ["mf_p", "mf_v2"] {
            for _ in 0..3 {
                let (line, v) = next(key, 2)?;
                if !(v[1] > 0.0) {
                    return Err(Error::parse(path, line, "membership width must be positive"));
                }
                mfs.push(GaussianMf { center: v[0], sigma: v[1] });
            }
        }
        let mut rules = [[[0.0; 3]; 2]; N_RULES];
        for (k, rule) in rules.iter_mut().enumerate() {
            let (line, v) = next("rule", 8)?;
            if v[0] != (k / 3) as f64 || v[1] != (k % 3) as f64 {
                return Err(Error::parse(path, line, format!("expected rule {} {}", k / 3, k % 3)));
            }
            rule[0].copy_from_slice(&v[2..5]);
            rule[1].copy_from_slice(&v[5..8]);
        }
        Ok(Self {
            ranges,
            p_mfs: [mfs[0], mfs[1], mfs[2]],
            v2_mfs: [mfs[3], mfs[4], mfs[5]],
            rules,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_file(path)?, path)
    }
}

/// Commanded `(d1, d2)`, each clamped to `[0, 1]`.
pub fn evaluate_fis(fis: &TsFis, p: f64, v2: f64) -> (f64, f64) {
    let [d1, d2] = fis.evaluate_raw(p, v2);
    (d1.clamp(0.0, 1.0), d2.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean absolute error of the clamped outputs at the surface points.
    pub mean_abs: [f64; 2],
    pub max_abs: [f64; 2],
}

/// Least-squares consequents for fixed antecedents, per output channel.
pub fn fit_fis(surface: &OptimalSurface, ranges: FisRanges) -> Result<(TsFis, FitReport)> {
    let mut fis = TsFis::new(ranges, [[[0.0; 3]; 2]; N_RULES])?;
    let pts = &surface.points;
    let cols = 3 * N_RULES;
    if pts.len() < cols {
        return Err(Error::SingularFit { column: pts.len(), pivot: 0.0 });
    }
    let a = DMatrix::from_fn(pts.len(), cols, |row, col| {
        let q = &pts[row];
        let w = fis.normalized_weights(q.p, q.v2)[col / 3];
        let (pn, vn) = ranges.normalize(q.p, q.v2);
        w * [1.0, pn, vn][col % 3]
    });
    let qr = a.qr();
    let r = qr.r();
    let largest = r.diagonal().iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if let Some((column, pivot)) = r
        .diagonal()
        .iter()
        .enumerate()
        .find(|(_, d)| !(d.abs() > RANK_TOL * largest))
    {
        return Err(Error::SingularFit { column, pivot: *pivot });
    }
    let q = qr.q();
    for channel in 0..2 {
        let y = DVector::from_iterator(pts.len(), pts.iter().map(|q| if channel == 0 { q.d1 } else { q.d2 }));
        let x = r
            .solve_upper_triangular(&(q.transpose() * y))
            .ok_or(Error::SingularFit { column: 0, pivot: 0.0 })?;
        for (k, rule) in fis.rules.iter_mut().enumerate() {
            rule[channel].copy_from_slice(&x.as_slice()[3 * k..3 * k + 3]);
        }
    }
    let report = fit_report(&fis, pts);
    Ok((fis, report))
}

pub fn fit_report(fis: &TsFis, pts: &[OptimalPoint]) -> FitReport {
    let mut rep = FitReport::default();
    for q in pts {
        let (d1, d2) = evaluate_fis(fis, q.p, q.v2);
        for (k, e) in [(d1 - q.d1).abs(), (d2 - q.d2).abs()].into_iter().enumerate() {
            rep.mean_abs[k] += e / pts.len() as f64;
            rep.max_abs[k] = rep.max_abs[k].max(e);
        }
    }
    rep
}

/// Optimal surface queried by nearest stored operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct LutBaseline {
    pub surface: OptimalSurface,
    pub ranges: FisRanges,
}

impl LutBaseline {
    pub fn new(surface: OptimalSurface, ranges: FisRanges) -> Result<Self> {
        ranges.validate()?;
        if surface.points.is_empty() {
            return Err(Error::InvalidConfig("lookup table needs at least one point".into()));
        }
        Ok(Self { surface, ranges })
    }
}

/// Stored optimum nearest in range-scaled distance; the lower index wins
/// ties.
pub fn lut_lookup(lut: &LutBaseline, p: f64, v2: f64) -> (f64, f64) {
    let (pn, vn) = lut.ranges.normalize(p, v2);
    let mut best = (f64::INFINITY, &lut.surface.points[0]);
    for q in &lut.surface.points {
        let (qp, qv) = lut.ranges.normalize(q.p, q.v2);
        let d = (qp - pn).powi(2) + (qv - vn).powi(2);
        if d < best.0 {
            best = (d, q);
        }
    }
    (best.1.d1, best.1.d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pso::operating_grid;

    fn ranges() -> FisRanges {
        FisRanges::from_params(&ConverterParams::design_case())
    }

    fn surface_from(f: impl Fn(f64, f64) -> (f64, f64)) -> OptimalSurface {
        let params = ConverterParams::design_case();
        OptimalSurface {
            points: operating_grid(&params, 10, 8)
                .into_iter()
                .map(|(p, v2)| {
                    let (d1, d2) = f(p, v2);
                    OptimalPoint { p, v2, d1, d2, i_pk: 1.0 }
                })
                .collect(),
        }
    }

    #[test]
    fn membership_closed_forms() {
        let mf = GaussianMf { center: 3.0, sigma: 2.0 };
        assert_eq!(gaussian_mf(3.0, mf), 1.0);
        assert!((gaussian_mf(5.0, mf) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_mf(7.0, mf) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((gaussian_mf(5.0, mf) - 0.60653).abs() < 1e-5);
        assert!((gaussian_mf(-1.0, mf) - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn antecedent_placement() {
        let fis = TsFis::new(ranges(), [[[0.0; 3]; 2]; N_RULES]).unwrap();
        assert_eq!(fis.p_mfs.map(|m| m.center), [100.0, 550.0, 1000.0]);
        assert_eq!(fis.v2_mfs.map(|m| m.center), [160.0, 195.0, 230.0]);
        assert_eq!(fis.p_mfs[0].sigma, 225.0);
        assert_eq!(fis.v2_mfs[0].sigma, 17.5);
    }

    #[test]
    fn hand_weighted_average() {
        assert!((defuzzify(&[1.0, 3.0], &[0.2, 0.6]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_consequents_reproduce_affine_map() {
        let f = [0.2, 0.5, 0.1];
        let fis = TsFis::new(ranges(), [[f, [1.3, -0.4, 0.0]]; N_RULES]).unwrap();
        for (p, v2) in [(100.0, 160.0), (550.0, 210.0), (1000.0, 230.0), (5e4, -3e3)] {
            let (pn, vn) = fis.ranges.normalize(p, v2);
            let (d1, d2) = evaluate_fis(&fis, p, v2);
            assert!((d1 - (0.2 + 0.5 * pn + 0.1 * vn).clamp(0.0, 1.0)).abs() < 1e-12);
            assert!((d2 - (1.3 - 0.4 * pn).clamp(0.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_never_vanish() {
        let fis = TsFis::new(ranges(), [[[0.5, 0.0, 0.0]; 2]; N_RULES]).unwrap();
        for (p, v2) in [(1e12, -1e12), (-1e300, 1e300), (550.0, 195.0)] {
            let w = fis.normalized_weights(p, v2);
            assert!(w.iter().all(|x| x.is_finite()) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let (d1, d2) = evaluate_fis(&fis, p, v2);
            assert!((d1 - 0.5).abs() < 1e-15 && (d2 - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_surface_fits_exactly() {
        let (fis, rep) = fit_fis(&surface_from(|_, _| (0.7, 1.0)), ranges()).unwrap();
        assert!(rep.max_abs[0] < 1e-12 && rep.max_abs[1] < 1e-12, "{rep:?}");
        for (p, v2) in [(333.0, 171.0), (999.0, 229.0)] {
            let (d1, d2) = evaluate_fis(&fis, p, v2);
            assert!((d1 - 0.7).abs() < 1e-9 && (d2 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_surface_reproduced_off_grid() {
        let r = ranges();
        let f = move |p: f64, v2: f64| {
            let (pn, vn) = r.normalize(p, v2);
            (0.2 + 0.5 * pn + 0.1 * vn, 0.9 - 0.3 * pn + 0.05 * vn)
        };
        let (fis, _) = fit_fis(&surface_from(f), r).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (p, v2) = (rng.random_range(100.0..=1000.0), rng.random_range(160.0..=230.0));
            let (e1, e2) = f(p, v2);
            let (d1, d2) = evaluate_fis(&fis, p, v2);
            assert!((d1 - e1).abs() < 1e-9 && (d2 - e2).abs() < 1e-9, "{p} {v2}");
        }
    }

    #[test]
    fn degenerate_grid_is_singular() {
        let mut s = surface_from(|_, _| (0.5, 0.5));
        s.points.iter_mut().for_each(|q| q.v2 = 200.0);
        assert!(matches!(fit_fis(&s, ranges()), Err(Error::SingularFit { .. })));
        s.points.truncate(9);
        assert!(matches!(fit_fis(&s, ranges()), Err(Error::SingularFit { .. })));
    }

    #[test]
    fn lookup_rules() {
        let s = surface_from(|p, v2| (p / 1000.0, v2 / 230.0));
        let lut = LutBaseline::new(s.clone(), ranges()).unwrap();
        for q in &s.points {
            assert_eq!(lut_lookup(&lut, q.p, q.v2), (q.d1, q.d2));
        }
        // Power grid spacing is 100 W; 150 W is equidistant from 100 and 200 W.
        assert_eq!(lut_lookup(&lut, 150.0, 160.0), (0.1, 160.0 / 230.0));
    }

    #[test]
    fn lookup_jumps_where_fis_does_not() {
        let s = surface_from(|p, _| ((p / 1000.0).powi(2), 1.0));
        let lut = LutBaseline::new(s.clone(), ranges()).unwrap();
        let (fis, _) = fit_fis(&s, ranges()).unwrap();
        let sweep: Vec<f64> = (0..=1000).map(|k| 100.0 + 0.9 * k as f64).collect();
        let max_step = |f: &dyn Fn(f64) -> f64| sweep.windows(2).map(|w| (f(w[1]) - f(w[0])).abs()).fold(0.0, f64::max);
        let lut_step = max_step(&|p| lut_lookup(&lut, p, 200.0).0);
        let fis_step = max_step(&|p| evaluate_fis(&fis, p, 200.0).0);
        assert!(lut_step > 0.05 && fis_step < 0.01, "{lut_step} {fis_step}");
    }

    #[test]
    fn text_round_trip() {
        let (fis, _) = fit_fis(&surface_from(|p, v2| (p / 1000.0, (v2 / 230.0).sqrt())), ranges()).unwrap();
        let text = fis.to_text();
        assert!(text.starts_with("dab-tps-fis 1\n"));
        assert_eq!(TsFis::from_text(&text, Path::new("f.txt")).unwrap(), fis);
    }

    proptest::proptest! {
        #[test]
        fn outputs_bounded_and_continuous(p in 0.0f64..1200.0, v2 in 140.0f64..250.0, dp in -1.0f64..1.0, dv in -1.0f64..1.0) {
            let (fis, _) = fit_fis(&surface_from(|p, v2| ((p / 900.0).sin().abs(), (v2 / 50.0).cos().abs())), ranges()).unwrap();
            let (a1, a2) = evaluate_fis(&fis, p, v2);
            let (b1, b2) = evaluate_fis(&fis, p + dp * 1e-6 * 900.0, v2 + dv * 1e-6 * 70.0);
            proptest::prop_assert!((0.0..=1.0).contains(&a1) && (0.0..=1.0).contains(&a2));
            proptest::prop_assert!((a1 - b1).abs() < 1e-3 && (a2 - b2).abs() < 1e-3);
        }
    }
}
