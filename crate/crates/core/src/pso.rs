//! Particle swarm search for the `(D1, D2)` pair with the lowest predicted
//! current stress at one operating point.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::converter::{max_power_capability, ConverterParams};
use crate::error::{Error, Result};
use crate::surrogate::MlpModel;
use crate::textio::{fmt_f64, parse_f64, read_csv, write_file};

/// Base value returned for `(D1, D2)` that cannot deliver the commanded power.
pub const PENALTY: f64 = 1e6;

pub const SURFACE_HEADER: &str = "p_w,v2_v,d1_opt,d2_opt,i_pk_opt_a";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoConfig {
    pub n_particles: usize,
    pub max_iterations: usize,
    pub inertia_start: f64,
    pub inertia_end: f64,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
    pub stagnation_window: usize,
    pub stagnation_tol: f64,
    pub velocity_limit: f64,
    /// Move particles with the velocity from before the update.
    pub literal_position_update: bool,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            n_particles: 20,
            max_iterations: 100,
            inertia_start: 0.9,
            inertia_end: 0.4,
            c1: 2.05,
            c2: 2.05,
            seed: 0,
            stagnation_window: 15,
            stagnation_tol: 1e-6,
            velocity_limit: 1.0,
            literal_position_update: false,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 || self.max_iterations == 0 {
            return Err(Error::InvalidConfig("need at least 2 particles and 1 iteration".into()));
        }
        if !(self.inertia_start >= self.inertia_end) {
            return Err(Error::InvalidConfig(format!(
                "inertia schedule must be non-increasing ({} -> {})",
                self.inertia_start, self.inertia_end
            )));
        }
        if !(self.velocity_limit > 0.0 && self.stagnation_tol >= 0.0 && self.c1 >= 0.0 && self.c2 >= 0.0) {
            return Err(Error::InvalidConfig("velocity limit, tolerance and acceleration factors out of range".into()));
        }
        Ok(())
    }

    /// Linear schedule from `inertia_start` at the first step to `inertia_end`
    /// at the last.
    pub fn inertia(&self, iteration: usize) -> f64 {
        if self.max_iterations <= 1 {
            return self.inertia_start;
        }
        let frac = (iteration.min(self.max_iterations - 1)) as f64 / (self.max_iterations - 1) as f64;
        self.inertia_start + (self.inertia_end - self.inertia_start) * frac
    }
}

/// Function minimized over `[0, 1]^2`.
pub trait Objective: Sync {
    fn eval(&self, d1: f64, d2: f64) -> f64;
}

impl<F: Fn(f64, f64) -> f64 + Sync> Objective for F {
    fn eval(&self, d1: f64, d2: f64) -> f64 {
        self(d1, d2)
    }
}

/// Surrogate-predicted current stress with a capability-gap penalty.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateObjective<'a> {
    pub model: &'a MlpModel,
    pub params: &'a ConverterParams,
    pub p: f64,
    pub v2: f64,
}

impl SurrogateObjective<'_> {
    pub fn capability(&self, d1: f64, d2: f64) -> f64 {
        max_power_capability(self.params, self.v2, d1, d2).power
    }
}

impl Objective for SurrogateObjective<'_> {
    fn eval(&self, d1: f64, d2: f64) -> f64 {
        let cap = self.capability(d1, d2);
        if cap >= self.p {
            self.model.forward(&[self.p, self.v2, d1, d2])
        } else {
            PENALTY + (self.p - cap)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub best_position: [f64; 2],
    pub best_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    pub best_position: [f64; 2],
    pub best_value: f64,
    pub iteration: usize,
}

impl Swarm {
    /// Positions uniform on the unit square, velocities uniform on
    /// `[-0.1, 0.1]`.
    pub fn init(cfg: &PsoConfig, rng: &mut impl Rng, objective: &impl Objective) -> Self {
        let particles: Vec<Particle> = (0..cfg.n_particles)
            .map(|_| {
                let position = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
                let velocity = [rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)];
                Particle {
                    position,
                    velocity,
                    best_position: position,
                    best_value: objective.eval(position[0], position[1]),
                }
            })
            .collect();
        Self::from_particles(particles)
    }

    pub fn from_particles(particles: Vec<Particle>) -> Self {
        let mut swarm = Self {
            particles,
            best_position: [f64::NAN; 2],
            best_value: f64::INFINITY,
            iteration: 0,
        };
        swarm.update_global_best();
        swarm
    }

    /// Lowest personal best; the first particle wins ties.
    fn update_global_best(&mut self) {
        for p in &self.particles {
            if p.best_value < self.best_value {
                self.best_value = p.best_value;
                self.best_position = p.best_position;
            }
        }
    }
}

/// Random factors `(r1, r2)` for one particle, each per dimension.
pub type Factors = ([f64; 2], [f64; 2]);

/// One swarm update with caller-provided random factors, one entry per
/// particle.
pub fn step_swarm_with(swarm: &mut Swarm, cfg: &PsoConfig, factors: &[Factors], objective: &impl Objective) {
    assert_eq!(factors.len(), swarm.particles.len());
    let omega = cfg.inertia(swarm.iteration);
    let g = swarm.best_position;
    for (p, (r1, r2)) in swarm.particles.iter_mut().zip(factors) {
        let old_velocity = p.velocity;
        for k in 0..2 {
            let v = omega * p.velocity[k]
                + cfg.c1 * r1[k] * (p.best_position[k] - p.position[k])
                + cfg.c2 * r2[k] * (g[k] - p.position[k]);
            p.velocity[k] = v.clamp(-cfg.velocity_limit, cfg.velocity_limit);
            let step = if cfg.literal_position_update { old_velocity[k] } else { p.velocity[k] };
            let x = p.position[k] + step;
            if x < 0.0 || x > 1.0 {
                p.position[k] = x.clamp(0.0, 1.0);
                p.velocity[k] = 0.0;
            } else {
                p.position[k] = x;
            }
        }
        let value = objective.eval(p.position[0], p.position[1]);
        if value < p.best_value {
            p.best_value = value;
            p.best_position = p.position;
        }
    }
    let before = swarm.best_value;
    swarm.update_global_best();
    assert!(swarm.best_value <= before, "global best worsened");
    swarm.iteration += 1;
}

pub fn step_swarm(swarm: &mut Swarm, cfg: &PsoConfig, rng: &mut impl Rng, objective: &impl Objective) {
    let factors: Vec<Factors> = (0..swarm.particles.len())
        .map(|_| {
            (
                [rng.random::<f64>(), rng.random::<f64>()],
                [rng.random::<f64>(), rng.random::<f64>()],
            )
        })
        .collect();
    step_swarm_with(swarm, cfg, &factors, objective);
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoResult {
    pub d1: f64,
    pub d2: f64,
    pub value: f64,
    pub iterations: usize,
    /// Global best after initialization and after every step.
    pub history: Vec<f64>,
}

/// Runs the swarm until `max_iterations` or until the global best improves
/// by less than `stagnation_tol` for `stagnation_window` consecutive steps.
pub fn optimize(objective: &impl Objective, cfg: &PsoConfig, seed: u64) -> PsoResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swarm = Swarm::init(cfg, &mut rng, objective);
    let mut history = vec![swarm.best_value];
    let mut stalled = 0;
    while swarm.iteration < cfg.max_iterations {
        let before = swarm.best_value;
        step_swarm(&mut swarm, cfg, &mut rng, objective);
        history.push(swarm.best_value);
        if before - swarm.best_value < cfg.stagnation_tol {
            stalled += 1;
            if stalled >= cfg.stagnation_window {
                break;
            }
        } else {
            stalled = 0;
        }
    }
    PsoResult {
        d1: swarm.best_position[0],
        d2: swarm.best_position[1],
        value: swarm.best_value,
        iterations: swarm.iteration,
        history,
    }
}

/// Optimal modulation at one operating point.
pub fn optimize_point(
    p: f64,
    v2: f64,
    model: &MlpModel,
    params: &ConverterParams,
    cfg: &PsoConfig,
    seed: u64,
) -> Result<PsoResult> {
    let in_range = |x: f64, lo: f64, hi: f64| x >= lo * (1.0 - 1e-12) && x <= hi * (1.0 + 1e-12);
    if !in_range(p, params.p_min(), params.p_max()) || !in_range(v2, params.v2_min(), params.v2_max()) {
        return Err(Error::InvalidConfig(format!("operating point P = {p} W, V2 = {v2} V outside design ranges")));
    }
    let result = optimize(&SurrogateObjective { model, params, p, v2 }, cfg, seed);
    if result.value >= PENALTY {
        return Err(Error::NoFeasiblePoint { p, v2 });
    }
    Ok(result)
}

/// Exhaustive minimum over the `grid_n x grid_n` lattice on the unit square;
/// the first lattice point in `(d1, d2)` order wins ties.
pub fn brute_force_reference(objective: &impl Objective, grid_n: usize) -> (f64, f64, f64) {
    let axis = crate::dataset::linspace(0.0, 1.0, grid_n);
    let row_min = |d1: f64| {
        axis.iter()
            .map(|&d2| (d2, objective.eval(d1, d2)))
            .fold((f64::NAN, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
    };
    let rows: Vec<(f64, f64)> = axis.par_iter().map(|&d1| row_min(d1)).collect();
    let mut best = (f64::NAN, f64::NAN, f64::INFINITY);
    for (&d1, (d2, v)) in axis.iter().zip(rows) {
        if v < best.2 {
            best = (d1, d2, v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalPoint {
    pub p: f64,
    pub v2: f64,
    pub d1: f64,
    pub d2: f64,
    pub i_pk: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimalSurface {
    pub points: Vec<OptimalPoint>,
}

/// Seed for point `index` of a sweep.
pub fn point_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Optimizes every `(p, v2)` independently; the outcome depends only on the
/// master seed and the point order.
pub fn sweep(
    points: &[(f64, f64)],
    model: &MlpModel,
    params: &ConverterParams,
    cfg: &PsoConfig,
    master_seed: u64,
) -> Result<OptimalSurface> {
    cfg.validate()?;
    let points = points
        .par_iter()
        .enumerate()
        .map(|(k, &(p, v2))| {
            let r = optimize_point(p, v2, model, params, cfg, point_seed(master_seed, k))?;
            Ok(OptimalPoint { p, v2, d1: r.d1, d2: r.d2, i_pk: r.value })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OptimalSurface { points })
}

/// Cartesian grid over the design ranges, `v2` varying fastest.
pub fn operating_grid(params: &ConverterParams, n_p: usize, n_v2: usize) -> Vec<(f64, f64)> {
    let ps = crate::dataset::linspace(params.p_min(), params.p_max(), n_p);
    let vs = crate::dataset::linspace(params.v2_min(), params.v2_max(), n_v2);
    ps.iter().flat_map(|&p| vs.iter().map(move |&v| (p, v))).collect()
}

impl OptimalSurface {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SURFACE_HEADER}\n");
        for q in &self.points {
            let row = [q.p, q.v2, q.d1, q.d2, q.i_pk].map(fmt_f64).join(",");
            s.push_str(&row);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut points = Vec::new();
        for (line, fields) in read_csv(path, SURFACE_HEADER)? {
            let v = fields
                .iter()
                .map(|f| parse_f64(f, path, line))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 5 {
                return Err(Error::parse(path, line, "expected 5 fields"));
            }
            if !(0.0..=1.0).contains(&v[2]) || !(0.0..=1.0).contains(&v[3]) {
                return Err(Error::parse(path, line, "duty ratio outside [0, 1]"));
            }
            points.push(OptimalPoint { p: v[0], v2: v[1], d1: v[2], d2: v[3], i_pk: v[4] });
        }
        Ok(Self { points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(d1: f64, d2: f64) -> f64 {
        (d1 - 0.3).powi(2) + (d2 - 0.7).powi(2)
    }

    fn one_particle(position: [f64; 2], velocity: [f64; 2], best: [f64; 2]) -> Particle {
        Particle { position, velocity, best_position: best, best_value: 1.0 }
    }

    #[test]
    fn hand_checked_update() {
        let cfg = PsoConfig::default();
        assert_eq!(cfg.inertia(0), 0.9);
        let mut swarm = Swarm::from_particles(vec![
            one_particle([0.5, 0.5], [0.1, -0.1], [0.6, 0.4]),
            Particle { best_value: 0.0, ..one_particle([0.7, 0.3], [0.0, 0.0], [0.7, 0.3]) },
        ]);
        assert_eq!(swarm.best_position, [0.7, 0.3]);
        let half = ([0.5, 0.5], [0.5, 0.5]);
        step_swarm_with(&mut swarm, &cfg, &[half, half], &|_: f64, _: f64| 5.0);
        let p = swarm.particles[0];
        assert!((p.velocity[0] - 0.3975).abs() < 1e-12 && (p.velocity[1] + 0.3975).abs() < 1e-12);
        assert!((p.position[0] - 0.8975).abs() < 1e-12 && (p.position[1] - 0.1025).abs() < 1e-12);
    }

    #[test]
    fn literal_update_moves_with_old_velocity() {
        let cfg = PsoConfig { literal_position_update: true, ..PsoConfig::default() };
        let mut swarm = Swarm::from_particles(vec![
            one_particle([0.5, 0.5], [0.1, -0.1], [0.6, 0.4]),
            Particle { best_value: 0.0, ..one_particle([0.7, 0.3], [0.0, 0.0], [0.7, 0.3]) },
        ]);
        let half = ([0.5, 0.5], [0.5, 0.5]);
        step_swarm_with(&mut swarm, &cfg, &[half, half], &|_: f64, _: f64| 5.0);
        let p = swarm.particles[0];
        assert!((p.position[0] - 0.6).abs() < 1e-12 && (p.position[1] - 0.4).abs() < 1e-12);
        assert!((p.velocity[0] - 0.3975).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_stays_put() {
        let cfg = PsoConfig::default();
        let mut swarm = Swarm::from_particles(vec![Particle {
            best_value: 0.0,
            ..one_particle([0.4, 0.6], [0.0, 0.0], [0.4, 0.6])
        }]);
        step_swarm_with(&mut swarm, &cfg, &[([0.9, 0.1], [0.3, 0.7])], &quadratic);
        assert_eq!(swarm.particles[0].position, [0.4, 0.6]);
        assert_eq!(swarm.particles[0].velocity, [0.0, 0.0]);
    }

    #[test]
    fn boundary_clamps_and_zeroes_velocity() {
        let cfg = PsoConfig::default();
        let mut swarm = Swarm::from_particles(vec![Particle {
            best_value: 0.0,
            ..one_particle([0.05, 0.95], [-0.5, 0.5], [0.05, 0.95])
        }]);
        step_swarm_with(&mut swarm, &cfg, &[([0.0; 2], [0.0; 2])], &quadratic);
        let p = swarm.particles[0];
        assert_eq!(p.position, [0.0, 1.0]);
        assert_eq!(p.velocity, [0.0, 0.0]);
    }

    #[test]
    fn velocity_is_limited() {
        let cfg = PsoConfig::default();
        let mut swarm = Swarm::from_particles(vec![
            one_particle([0.0, 0.0], [0.9, 0.9], [1.0, 1.0]),
            Particle { best_value: 0.0, ..one_particle([1.0, 1.0], [0.0, 0.0], [1.0, 1.0]) },
        ]);
        step_swarm_with(&mut swarm, &cfg, &[([1.0; 2], [1.0; 2]), ([0.0; 2], [0.0; 2])], &quadratic);
        assert_eq!(swarm.particles[0].velocity, [1.0, 1.0]);
        assert_eq!(swarm.particles[0].position, [1.0, 1.0]);
    }

    #[test]
    fn finds_quadratic_minimum() {
        // Early stopping disabled: the swarm stalls on plateaus while inertia is high.
        let cfg = PsoConfig { stagnation_window: usize::MAX, ..PsoConfig::default() };
        for seed in 0..20 {
            let r = optimize(&quadratic, &cfg, seed);
            assert!((r.d1 - 0.3).abs() < 1e-3 && (r.d2 - 0.7).abs() < 1e-3, "{r:?}");
            assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(r.iterations, 100);
        }
    }

    #[test]
    fn stops_after_stagnation_window() {
        let r = optimize(&|_: f64, _: f64| 1.0, &PsoConfig::default(), 1);
        assert_eq!(r.iterations, 15);
        assert_eq!(r.history.len(), 16);
    }

    #[test]
    fn lattice_minimum_is_exact() {
        assert_eq!(brute_force_reference(&quadratic, 101), (0.3, 0.7, 0.0));
        let (d1, _, _) = brute_force_reference(&|d1: f64, d2: f64| -d1 + 0.1 * d2, 101);
        assert_eq!(d1, 1.0);
        let (d1, _, _) = brute_force_reference(&|d1: f64, _: f64| d1, 101);
        assert_eq!(d1, 0.0);
    }

    #[test]
    fn inertia_schedule_is_linear() {
        let cfg = PsoConfig::default();
        assert_eq!(cfg.inertia(0), 0.9);
        assert!((cfg.inertia(99) - 0.4).abs() < 1e-15);
        assert!((0..99).all(|m| cfg.inertia(m + 1) <= cfg.inertia(m)));
        assert!(PsoConfig { inertia_start: 0.4, inertia_end: 0.9, ..cfg }.validate().is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let cfg = PsoConfig::default();
        assert_eq!(optimize(&quadratic, &cfg, 3), optimize(&quadratic, &cfg, 3));
        assert_ne!(point_seed(1, 0), point_seed(1, 1));
    }

    #[test]
    fn surface_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = OptimalSurface {
            points: vec![OptimalPoint { p: 100.0, v2: 160.0, d1: 0.37, d2: 1.0, i_pk: 2.25 }],
        };
        s.save(&path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("p_w,v2_v,d1_opt,d2_opt,i_pk_opt_a\n"));
        assert_eq!(OptimalSurface::load(&path).unwrap(), s);
    }

    proptest::proptest! {
        #[test]
        fn positions_stay_in_bounds(seed in 0u64..1000, cx in -0.5f64..1.5, cy in -0.5f64..1.5) {
            let cfg = PsoConfig { max_iterations: 30, ..PsoConfig::default() };
            let f = move |d1: f64, d2: f64| (d1 - cx).powi(2) + (d2 - cy).powi(2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut swarm = Swarm::init(&cfg, &mut rng, &f);
            for _ in 0..30 {
                let before = swarm.best_value;
                step_swarm(&mut swarm, &cfg, &mut rng, &f);
                proptest::prop_assert!(swarm.best_value <= before);
                for p in &swarm.particles {
                    proptest::prop_assert!(p.position.iter().all(|x| (0.0..=1.0).contains(x)));
                }
            }
        }
    }
}
