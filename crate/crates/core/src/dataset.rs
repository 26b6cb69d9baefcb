//! Current-stress dataset: grid enumeration, exact solution of every grid
//! point, CSV persistence and seeded train/validate/test splitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::converter::{peak_and_power, solve_d0_for_power, ConverterParams, ConverterSpec};
use crate::error::{Error, Result};
use crate::textio::{fmt_f64, parse_f64, read_csv, read_file, write_file};

pub const DATASET_HEADER: &str = "p_w,v2_v,d1,d2,d0,i_pk_a,feasible";

/// Number of evenly spaced values along each of the four grid axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_p: usize,
    pub n_v2: usize,
    pub n_d1: usize,
    pub n_d2: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl GridSpec {
    /// 10 x 10 x 15 x 15 = 22500 points.
    pub fn desk_scale() -> Self {
        Self {
            n_p: 10,
            n_v2: 10,
            n_d1: 15,
            n_d2: 15,
        }
    }

    /// 20^4 = 160000 points.
    pub fn full_scale() -> Self {
        Self {
            n_p: 20,
            n_v2: 20,
            n_d1: 20,
            n_d2: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_p, self.n_v2, self.n_d1, self.n_d2];
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::InvalidConfig(format!("grid counts must all be >= 2, got {counts:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_p * self.n_v2 * self.n_d1 * self.n_d2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n` evenly spaced values from `lo` to `hi`, both included exactly.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| {
                if k + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub p: f64,
    pub v2: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Cartesian product in `(p, v2, d1, d2)` order, `d2` varying fastest.
pub fn build_grid(params: &ConverterParams, spec: &GridSpec) -> Vec<GridPoint> {
    let ps = linspace(params.p_min(), params.p_max(), spec.n_p);
    let v2s = linspace(params.v2_min(), params.v2_max(), spec.n_v2);
    let d1s = linspace(0.0, 1.0, spec.n_d1);
    let d2s = linspace(0.0, 1.0, spec.n_d2);
    let mut out = Vec::with_capacity(spec.len());
    for &p in &ps {
        for &v2 in &v2s {
            for &d1 in &d1s {
                for &d2 in &d2s {
                    out.push(GridPoint { p, v2, d1, d2 });
                }
            }
        }
    }
    out
}

/// Solved phase shift and resulting current stress of a feasible sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solved {
    pub d0: f64,
    pub i_pk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub p: f64,
    pub v2: f64,
    pub d1: f64,
    pub d2: f64,
    /// `None` when the power command exceeds the capability of `(d1, d2)`.
    pub solved: Option<Solved>,
}

impl SampleRecord {
    pub fn feasible(&self) -> bool {
        self.solved.is_some()
    }

    pub fn d0(&self) -> f64 {
        self.solved.map_or(f64::NAN, |s| s.d0)
    }

    pub fn i_pk(&self) -> f64 {
        self.solved.map_or(f64::NAN, |s| s.i_pk)
    }

    pub fn inputs(&self) -> [f64; 4] {
        [self.p, self.v2, self.d1, self.d2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub params: ConverterSpec,
    pub grid: GridSpec,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub records: Vec<SampleRecord>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn feasible(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.feasible())
    }
}

/// Solve one operating point exactly.
pub fn solve_sample(params: &ConverterParams, pt: GridPoint) -> SampleRecord {
    let solved = solve_d0_for_power(params, pt.v2, pt.p, pt.d1, pt.d2).ok().map(|d0| Solved {
        d0,
        i_pk: peak_and_power(params, pt.v2, d0, pt.d1, pt.d2).0,
    });
    SampleRecord {
        p: pt.p,
        v2: pt.v2,
        d1: pt.d1,
        d2: pt.d2,
        solved,
    }
}

/// Solve every grid point. Infeasible points stay in the set, flagged.
pub fn generate_dataset(params: &ConverterParams, spec: &GridSpec, seed: u64) -> Result<SampleSet> {
    spec.validate()?;
    let records = build_grid(params, spec)
        .into_par_iter()
        .map(|pt| solve_sample(params, pt))
        .collect();
    Ok(SampleSet {
        records,
        provenance: Provenance {
            params: *params.spec(),
            grid: *spec,
            seed,
            tool_version: crate::VERSION.to_owned(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validate: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            validate: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub validate: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Shuffle the feasible records under `seed` and cut them into three parts.
/// Train and validate sizes are floored; the test split takes the rest.
pub fn split_dataset(set: &SampleSet, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    let SplitFractions { train, validate, test } = fractions;
    if [train, validate, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (train + validate + test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut feasible: Vec<SampleRecord> = set.feasible().copied().collect();
    feasible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = feasible.len();
    let n_train = ((train * n as f64) + 1e-9).floor() as usize;
    let n_val = ((validate * n as f64) + 1e-9).floor() as usize;
    let test = feasible.split_off((n_train + n_val).min(n));
    let validate = feasible.split_off(n_train.min(feasible.len()));
    Ok(Splits {
        train: feasible,
        validate,
        test,
    })
}

/// Sidecar path for a dataset file: same stem, `.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.meta.json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    #[serde(flatten)]
    provenance: Provenance,
    records: usize,
    feasible: usize,
}

pub fn dataset_csv(records: &[SampleRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 140);
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for r in records {
        let row = [r.p, r.v2, r.d1, r.d2, r.d0(), r.i_pk()].map(fmt_f64).join(",");
        out.push_str(&row);
        out.push_str(if r.feasible() { ",1\n" } else { ",0\n" });
    }
    out
}

pub fn write_dataset(set: &SampleSet, path: &Path) -> Result<()> {
    write_file(path, dataset_csv(&set.records).as_bytes())?;
    let meta = Meta {
        provenance: set.provenance.clone(),
        records: set.records.len(),
        feasible: set.feasible().count(),
    };
    write_file(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for (line, fields) in read_csv(path, DATASET_HEADER)? {
        let num = |k: usize| parse_f64(&fields[k], path, line);
        let solved = match fields[6].as_str() {
            "1" => Some(Solved {
                d0: num(4)?,
                i_pk: num(5)?,
            }),
            "0" => None,
            other => return Err(Error::parse(path, line, format!("feasible flag {other:?}"))),
        };
        records.push(SampleRecord {
            p: num(0)?,
            v2: num(1)?,
            d1: num(2)?,
            d2: num(3)?,
            solved,
        });
    }
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<SampleSet> {
    let records = read_records(path)?;
    let meta_file = meta_path(path);
    let meta: Meta = serde_json::from_str(&read_file(&meta_file)?)?;
    if meta.records != records.len() {
        return Err(Error::parse(
            &meta_file,
            0,
            format!("sidecar lists {} records, csv has {}", meta.records, records.len()),
        ));
    }
    Ok(SampleSet {
        records,
        provenance: meta.provenance,
    })
}
