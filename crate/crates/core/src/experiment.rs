//! Batch experiments: the controller comparison grid, the pose-sensor
//! characterization on a long linear move, and the self-check suites.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControllerKind;
use crate::dynamics::{
    cartesian_mass_matrix, forward_dynamics, inverse_dynamics_cartesian, inverse_dynamics_joint, mechanical_energy,
    CartesianState, DynParams, MachineParams, Torques,
};
use crate::error::{Error, Result};
use crate::kinematics::{
    d_inv, forward_kinematics, global_rates_accels, inverse_kinematics, leg_jacobian_inv, passive_trig,
    sample_interior_pose, GeomParams, LegIndex, Pose, Vec3,
};
use crate::sensors::{vision_read, PoseSample, VisionConfig};
use crate::simulator::{compute_metrics, run_simulation, simulate_open_loop, Identification, Metrics, SimConfig};
use crate::trajectory::{Path, PathSpec};

/// Converts meters to micrometers rounded half-to-even at the third decimal.
pub fn to_um(meters: f64) -> f64 {
    (meters * 1e9).round_ties_even() / 1e3
}

fn fmt_um(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{:.3}", to_um(v)),
        _ => String::new(),
    }
}

/// How independent runs are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Data-parallel over a thread pool (`None` uses the global pool).
    /// Falls back to sequential without the `parallel` feature.
    Parallel {
        jobs: Option<usize>,
    },
}

impl Default for Execution {
    fn default() -> Self {
        Execution::Parallel { jobs: None }
    }
}

/// Evaluates `f` on `0..n`, results in index order regardless of scheduling.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel { jobs } => {
            use rayon::prelude::*;
            let run = || (0..n).into_par_iter().map(&f).collect::<Vec<T>>();
            match jobs.map(|j| rayon::ThreadPoolBuilder::new().num_threads(j).build()) {
                Some(Ok(pool)) => pool.install(run),
                _ => run(),
            }
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Reference paths of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathChoice {
    #[serde(rename = "square_50mm")]
    Square50,
    #[serde(rename = "circle_50mm")]
    Circle50,
    #[serde(rename = "circle_60mm")]
    Circle60,
}

impl PathChoice {
    pub fn name(self) -> &'static str {
        match self {
            PathChoice::Square50 => "square_50mm",
            PathChoice::Circle50 => "circle_50mm",
            PathChoice::Circle60 => "circle_60mm",
        }
    }

    /// The 60 mm circle carries the 0.2 m/s speed limit of the long-run test.
    pub fn spec(self, geom: &GeomParams, accel: f64) -> PathSpec {
        let c = geom.workspace_center();
        match self {
            PathChoice::Square50 => PathSpec::square(0.05, c, accel),
            PathChoice::Circle50 => PathSpec::circle(0.025, c, accel),
            PathChoice::Circle60 => PathSpec::circle(0.03, c, accel).with_speed_limit(0.2),
        }
    }
}

/// Sensor grade: encoder resolution and pose-sensor accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyLevel {
    /// 10 μm encoders, 100 μm pose sensor.
    Coarse,
    /// 1 μm encoders, 10 μm pose sensor.
    Fine,
}

impl AccuracyLevel {
    pub fn name(self) -> &'static str {
        match self {
            AccuracyLevel::Coarse => "coarse",
            AccuracyLevel::Fine => "fine",
        }
    }

    pub fn encoder_resolution(self) -> f64 {
        match self {
            AccuracyLevel::Coarse => 10e-6,
            AccuracyLevel::Fine => 1e-6,
        }
    }

    pub fn vision_accuracy(self) -> f64 {
        match self {
            AccuracyLevel::Coarse => 100e-6,
            AccuracyLevel::Fine => 10e-6,
        }
    }

    /// Accuracy of the sensor the controller actually closes its loop on.
    pub fn sensor_accuracy(self, kind: ControllerKind) -> f64 {
        if kind.uses_vision() {
            self.vision_accuracy()
        } else {
            self.encoder_resolution()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub controllers: Vec<ControllerKind>,
    pub accuracies: Vec<AccuracyLevel>,
    pub identifications: Vec<Identification>,
    pub paths: Vec<PathChoice>,
    /// Acceleration limit of every path, m/s².
    pub accel: f64,
    pub replicates: usize,
    /// Replicate `r` runs with seed `base_seed + r` in every cell.
    pub base_seed: u64,
    /// Start of the metrics window, s.
    pub settle_skip: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            controllers: ControllerKind::ALL.to_vec(),
            accuracies: vec![AccuracyLevel::Coarse, AccuracyLevel::Fine],
            identifications: vec![Identification::Classical, Identification::Accurate],
            paths: vec![PathChoice::Square50],
            accel: 3.0,
            replicates: 5,
            base_seed: 1,
            settle_skip: 0.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.controllers.is_empty()
            || self.accuracies.is_empty()
            || self.identifications.is_empty()
            || self.paths.is_empty()
            || self.replicates == 0
        {
            return Err(Error::Config("every grid axis needs at least one entry".into()));
        }
        if !(self.accel > 0.0) || !(self.settle_skip >= 0.0) {
            return Err(Error::Config("grid accel must be > 0 and settle_skip >= 0".into()));
        }
        Ok(())
    }

    /// Cells in output order: path, identification, accuracy, controller.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &path in &self.paths {
            for &identification in &self.identifications {
                for &accuracy in &self.accuracies {
                    for &controller in &self.controllers {
                        cells.push(GridCell {
                            controller,
                            accuracy,
                            identification,
                            path,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn seed(&self, replicate: usize) -> u64 {
        self.base_seed.wrapping_add(replicate as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridCell {
    pub controller: ControllerKind,
    pub accuracy: AccuracyLevel,
    pub identification: Identification,
    pub path: PathChoice,
}

impl GridCell {
    /// Simulation settings of this cell for one seed, derived from `base`.
    pub fn sim_config(&self, base: &SimConfig, seed: u64) -> SimConfig {
        let mut cfg = *base;
        cfg.controller.kind = self.controller;
        cfg.encoder.resolution = self.accuracy.encoder_resolution();
        cfg.vision.accuracy = self.accuracy.vision_accuracy();
        cfg.identification = self.identification.spec(seed);
        cfg.with_seed(seed)
    }
}

/// Aggregated result of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: GridCell,
    pub accel: f64,
    /// Per-replicate metrics, `Err` holding the failure kind.
    pub runs: Vec<std::result::Result<Metrics, String>>,
    pub seeds: Vec<u64>,
}

fn mean_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl GridRow {
    fn successes(&self) -> impl Iterator<Item = &Metrics> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    fn stat(&self, f: impl Fn(&Metrics) -> f64) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.successes().map(f).collect();
        (!v.is_empty()).then(|| mean_sample_std(&v))
    }

    /// Mean and replicate standard deviation of the static accuracy.
    pub fn static_accuracy(&self) -> Option<(f64, f64)> {
        self.stat(|m| m.static_accuracy)
    }

    pub fn dynamic_accuracy(&self) -> Option<(f64, f64)> {
        self.stat(|m| m.dynamic_accuracy)
    }

    pub fn max_error(&self) -> Option<f64> {
        self.successes().map(|m| m.max_error).reduce(f64::max)
    }

    pub fn sensor_accuracy(&self) -> f64 {
        self.cell.accuracy.sensor_accuracy(self.cell.controller)
    }

    pub fn status(&self) -> String {
        let failures: Vec<&String> = self.runs.iter().filter_map(|r| r.as_ref().err()).collect();
        match failures.first() {
            None => "ok".into(),
            Some(kind) => format!("{kind} ({} of {} failed)", failures.len(), self.runs.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
}

pub const GRID_HEADER: &str = "controller,accuracy_level,sensor_um,identification,path,accel,replicates,static_um,static_std_um,dynamic_um,dynamic_std_um,max_um,static_improvement_pct,dynamic_improvement_pct,status";

impl GridResult {
    /// The single-axis row whose encoder resolution equals this row's sensor
    /// accuracy, under the same identification, path and acceleration.
    pub fn baseline(&self, row: &GridRow) -> Option<&GridRow> {
        self.rows.iter().find(|b| {
            b.cell.controller == ControllerKind::SingleAxis
                && b.sensor_accuracy() == row.sensor_accuracy()
                && b.cell.identification == row.cell.identification
                && b.cell.path == row.cell.path
                && b.accel == row.accel
        })
    }

    /// Percent reduction of (static, dynamic) error relative to [`GridResult::baseline`].
    pub fn improvement(&self, row: &GridRow) -> (Option<f64>, Option<f64>) {
        if row.cell.controller == ControllerKind::SingleAxis {
            return (None, None);
        }
        let Some(base) = self.baseline(row) else {
            return (None, None);
        };
        let pct = |a: Option<(f64, f64)>, b: Option<(f64, f64)>| match (a, b) {
            (Some((a, _)), Some((b, _))) if b > 0.0 => Some(100.0 * (b - a) / b),
            _ => None,
        };
        (
            pct(row.static_accuracy(), base.static_accuracy()),
            pct(row.dynamic_accuracy(), base.dynamic_accuracy()),
        )
    }

    pub fn find(
        &self,
        controller: ControllerKind,
        accuracy: AccuracyLevel,
        identification: Identification,
        path: PathChoice,
    ) -> Option<&GridRow> {
        self.rows.iter().find(|r| {
            r.cell
                == GridCell {
                    controller,
                    accuracy,
                    identification,
                    path,
                }
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{GRID_HEADER}")?;
        for row in &self.rows {
            let (s, d) = (row.static_accuracy(), row.dynamic_accuracy());
            let (si, di) = self.improvement(row);
            let pct = |v: Option<f64>| v.map_or(String::new(), |v| format!("{:.3}", (v * 1e3).round_ties_even() / 1e3));
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                row.cell.controller,
                row.cell.accuracy.name(),
                fmt_um(Some(row.sensor_accuracy())),
                row.cell.identification.name(),
                row.cell.path.name(),
                row.accel,
                row.runs.len(),
                fmt_um(s.map(|v| v.0)),
                fmt_um(s.map(|v| v.1)),
                fmt_um(d.map(|v| v.0)),
                fmt_um(d.map(|v| v.1)),
                fmt_um(row.max_error()),
                pct(si),
                pct(di),
                row.status(),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Runs every cell × replicate of the grid from the simulation template `base`.
pub fn run_grid(grid: &GridConfig, base: &SimConfig, exec: Execution) -> Result<GridResult> {
    grid.validate()?;
    base.validate()?;
    let geom = base.plant.geom;
    let mut paths = Vec::new();
    for &choice in &grid.paths {
        paths.push((choice, choice.spec(&geom, grid.accel).build(&geom)?));
    }
    let cells = grid.cells();
    let reps = grid.replicates;
    let outcomes = map_indexed(cells.len() * reps, exec, |job| {
        let (cell, r) = (&cells[job / reps], job % reps);
        let path = &paths.iter().find(|(c, _)| *c == cell.path).expect("path built").1;
        let cfg = cell.sim_config(base, grid.seed(r));
        run_simulation(&cfg, path)
            .and_then(|log| compute_metrics(&log, grid.settle_skip))
            .map_err(|e| e.kind().to_string())
    });
    let mut outcomes = outcomes.into_iter();
    let rows = cells
        .iter()
        .map(|cell| GridRow {
            cell: *cell,
            accel: grid.accel,
            runs: outcomes.by_ref().take(reps).collect(),
            seeds: (0..reps).map(|r| grid.seed(r)).collect(),
        })
        .collect();
    Ok(GridResult { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeConfig {
    /// Peak accelerations of the test moves, m/s².
    pub accels: Vec<f64>,
    /// Length of the straight move along x, m.
    pub distance: f64,
    /// Rest before and after the move, s.
    pub rest: f64,
    pub vision: VisionConfig,
    /// Fit `blur_gain` so that the first acceleration yields this dynamic error, m.
    pub calibrate_to: Option<f64>,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        Self {
            accels: vec![1.0, 3.0, 5.0, 10.0],
            distance: 0.2,
            rest: 0.25,
            vision: VisionConfig {
                static_bias: 198e-6,
                ..VisionConfig::default()
            },
            calibrate_to: Some(286e-6),
        }
    }
}

impl CharacterizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accels.is_empty() || self.accels.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("characterization accels must be nonempty and > 0".into()));
        }
        if !(self.distance > 0.0) || !(self.rest > 0.0) {
            return Err(Error::Config("characterization distance and rest must be > 0".into()));
        }
        if self.calibrate_to.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("calibrate_to must be > 0".into()));
        }
        self.vision.validate()
    }
}

/// Pose-sensor error on one test move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorErrors {
    pub accel: f64,
    /// Norm of the mean error over the samples taken at rest.
    pub static_error: f64,
    /// Root mean square of the error norm over the samples taken in motion.
    pub dynamic_error: f64,
    pub rest_samples: usize,
    pub motion_samples: usize,
}

/// Compares the pose sensor with the true pose, sample by sample, on a
/// straight rest-to-rest move through the workspace centre.
pub fn sensor_errors(
    accel: f64,
    distance: f64,
    rest: f64,
    vision: &VisionConfig,
    geom: &GeomParams,
) -> Result<SensorErrors> {
    let c = geom.workspace_center();
    let start = Pose::new(c.x - distance / 2.0, c.y, c.z);
    let end = Pose::new(c.x + distance / 2.0, c.y, c.z);
    let path = Path::point_to_point(start, end, accel, None)?;
    let total = 2.0 * rest + path.duration();
    let n = (total * vision.rate).floor() as usize;
    let history: Vec<PoseSample> = (0..=n)
        .map(|k| {
            let t = k as f64 / vision.rate;
            let sp = path.sample_clamped(t - rest);
            PoseSample {
                t,
                pose: sp.pose,
                acc: sp.acc,
            }
        })
        .collect();
    let mut rest_sum = Vec3::zeros();
    let (mut rest_n, mut motion_n, mut motion_sq) = (0usize, 0usize, 0.0);
    for (k, sample) in history.iter().enumerate() {
        let m = vision_read(&history[..=k], sample.t + vision.latency, vision)?;
        let e = m.value - sample.pose.to_vector();
        let tp = sample.t - rest;
        if tp <= 0.0 || tp >= path.duration() {
            rest_sum += e;
            rest_n += 1;
        } else {
            motion_sq += e.norm_squared();
            motion_n += 1;
        }
    }
    if rest_n == 0 || motion_n == 0 {
        return Err(Error::Config(
            "sensor rate too low for the characterization move".into(),
        ));
    }
    Ok(SensorErrors {
        accel,
        static_error: (rest_sum / rest_n as f64).norm(),
        dynamic_error: (motion_sq / motion_n as f64).sqrt(),
        rest_samples: rest_n,
        motion_samples: motion_n,
    })
}

/// Bisects `blur_gain` so that the dynamic error at `accel` equals `target`.
pub fn calibrate_blur_gain(cfg: &CharacterizeConfig, accel: f64, target: f64, geom: &GeomParams) -> Result<f64> {
    let dynamic = |gain: f64| -> Result<f64> {
        let vision = VisionConfig {
            blur_gain: gain,
            ..cfg.vision
        };
        Ok(sensor_errors(accel, cfg.distance, cfg.rest, &vision, geom)?.dynamic_error)
    };
    if dynamic(0.0)? > target {
        return Err(Error::Config(format!(
            "dynamic error target {target} is below the blur-free error"
        )));
    }
    let mut hi = 1e-4;
    while dynamic(hi)? < target {
        hi *= 2.0;
        if hi > 1.0 {
            return Err(Error::Config(format!("dynamic error target {target} not reachable")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dynamic(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Characterization {
    pub blur_gain: f64,
    pub rows: Vec<SensorErrors>,
}

pub const CHARACTERIZE_HEADER: &str = "accel,static_um,dynamic_um,rest_samples,motion_samples,blur_gain";

impl Characterization {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHARACTERIZE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{:.16e}",
                r.accel,
                fmt_um(Some(r.static_error)),
                fmt_um(Some(r.dynamic_error)),
                r.rest_samples,
                r.motion_samples,
                self.blur_gain
            )?;
        }
        Ok(())
    }
}

/// Sensor errors at every configured acceleration, after the optional blur fit.
pub fn characterize(cfg: &CharacterizeConfig, geom: &GeomParams) -> Result<Characterization> {
    cfg.validate()?;
    let blur_gain = match cfg.calibrate_to {
        Some(target) => calibrate_blur_gain(cfg, cfg.accels[0], target, geom)?,
        None => cfg.vision.blur_gain,
    };
    let vision = VisionConfig {
        blur_gain,
        ..cfg.vision
    };
    let rows = cfg
        .accels
        .iter()
        .map(|&a| sensor_errors(a, cfg.distance, cfg.rest, &vision, geom))
        .collect::<Result<Vec<_>>>()?;
    Ok(Characterization { blur_gain, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kinematics,
    Jacobian,
    Dynamics,
    Energy,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Kinematics, Suite::Jacobian, Suite::Dynamics, Suite::Energy];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Kinematics => "kinematics",
            Suite::Jacobian => "jacobian",
            Suite::Dynamics => "dynamics",
            Suite::Energy => "energy",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Fault injection: offset added to `d4` in the forward-kinematic model only.
    pub corrupt_d4: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 7,
            corrupt_d4: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: &'static str,
    /// Worst observed value (NaN if a computation failed).
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn worst<I: Iterator<Item = Result<f64>>>(values: I) -> f64 {
    let mut w = 0.0f64;
    for v in values {
        match v {
            Ok(v) if v.is_finite() => w = w.max(v),
            _ => return f64::NAN,
        }
    }
    w
}

fn poses(params: &MachineParams, opts: &VerifyOptions, salt: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt);
    (0..opts.samples)
        .map(|_| sample_interior_pose(&mut rng, &params.geom, 0.05 * params.geom.d4))
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// Runs one self-check suite on `params`.
pub fn run_suite(suite: Suite, params: &MachineParams, opts: &VerifyOptions) -> Vec<Check> {
    let geom = params.geom;
    let check = |name, worst, tolerance| Check {
        suite,
        name,
        worst,
        tolerance,
    };
    match suite {
        Suite::Kinematics => {
            let fk_geom = GeomParams {
                d4: geom.d4 + opts.corrupt_d4,
                ..geom
            };
            let ps = poses(params, opts, 1);
            let roundtrip = worst(ps.iter().map(|p| {
                let q = inverse_kinematics(p, &geom)?;
                Ok(forward_kinematics(&q, &fk_geom)?.distance(p))
            }));
            let trig = worst(ps.iter().map(|p| {
                let t = passive_trig(p, &geom)?;
                Ok(t.legs
                    .iter()
                    .flat_map(|l| [l.s2 * l.s2 + l.c2 * l.c2, l.s3 * l.s3 + l.c3 * l.c3])
                    .map(|v| (v - 1.0).abs())
                    .fold(0.0, f64::max))
            }));
            vec![
                check("fk_ik_roundtrip_m", roundtrip, 1e-9),
                check("trig_identity", trig, 1e-12),
            ]
        }
        Suite::Jacobian => {
            let ps = poses(params, opts, 2);
            let h = 1e-6;
            let fd = worst(ps.iter().map(|p| {
                let ana = d_inv(p, &geom)?;
                let mut num = ana;
                for j in 0..3 {
                    let mut plus = p.to_vector();
                    let mut minus = plus;
                    plus[j] += h;
                    minus[j] -= h;
                    let qp = inverse_kinematics(&Pose::from_vector(&plus), &geom)?.to_vector();
                    let qm = inverse_kinematics(&Pose::from_vector(&minus), &geom)?.to_vector();
                    num.set_column(j, &((qp - qm) / (2.0 * h)));
                }
                Ok((num - ana).amax() / ana.amax())
            }));
            let rows = worst(ps.iter().map(|p| {
                let m = d_inv(p, &geom)?;
                let mut w = 0.0f64;
                for leg in LegIndex::ALL {
                    let j = leg_jacobian_inv(p, &geom, leg)?;
                    w = w.max((j.row(0) - m.row(leg.index())).amax());
                }
                Ok(w)
            }));
            vec![
                check("d_inv_vs_finite_difference", fd, 1e-5),
                check("leg_row_vs_d_inv", rows, 1e-12),
            ]
        }
        Suite::Dynamics => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 3);
            let states: Vec<CartesianState> = poses(params, opts, 3)
                .into_iter()
                .map(|p| CartesianState::new(p, random_vec(&mut rng, 0.5), random_vec(&mut rng, 5.0)))
                .collect();
            let schemes = worst(states.iter().map(|s| {
                let q = inverse_kinematics(&s.pose, &geom)?;
                let (qd, qdd) = global_rates_accels(&s.pose, &s.vel, &s.acc, &geom)?;
                let a = inverse_dynamics_joint(&q, &qd, &qdd, params)?.0;
                let b = inverse_dynamics_cartesian(s, params)?.0;
                Ok((a - b).norm() / b.norm())
            }));
            let roundtrip = worst(states.iter().map(|s| {
                let tau = inverse_dynamics_cartesian(s, params)?;
                let acc = forward_dynamics(&s.pose, &s.vel, &tau, params)?;
                Ok((acc - s.acc).norm() / s.acc.norm())
            }));
            let mass = worst(states.iter().map(|s| {
                let a = cartesian_mass_matrix(&s.pose, params)?;
                let min_eig = a.symmetric_eigenvalues().min();
                let asym = (a - a.transpose()).norm() / a.norm();
                Ok(if min_eig > 0.0 { asym } else { f64::INFINITY })
            }));
            vec![
                check("scheme_equivalence_rel", schemes, 1e-8),
                check("inverse_forward_roundtrip_rel", roundtrip, 1e-8),
                check("mass_matrix_asymmetry_rel", mass, 1e-9),
            ]
        }
        Suite::Energy => {
            let free = MachineParams {
                geom,
                dynamics: DynParams {
                    gravity: [0.0; 3],
                    ..params.dynamics
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 4);
            let cases = (opts.samples / 50).max(1);
            let drift = worst((0..cases).map(|_| {
                let p = sample_interior_pose(&mut rng, &geom, 0.2 * geom.d4);
                let v = random_vec(&mut rng, 0.05);
                let e0 = mechanical_energy(&p, &v, &free)?;
                let traj = simulate_open_loop(p, v, &Torques::zero(), 0.5, 1e-4, &free)?;
                let (_, x, v1) = traj.last().expect("nonempty trajectory");
                Ok(((mechanical_energy(x, v1, &free)? - e0) / e0).abs())
            }));
            vec![check("free_motion_energy_drift_rel", drift, 1e-5)]
        }
    }
}

/// Runs the selected suites (all when empty).
pub fn verify(suites: &[Suite], params: &MachineParams, opts: &VerifyOptions) -> Vec<Check> {
    let selected: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites.to_vec()
    };
    selected.into_iter().flat_map(|s| run_suite(s, params, opts)).collect()
}
