//! Closed-loop simulation: Cartesian plant integrated with fixed-step RK4,
//! torques held between control instants, sensors sampled on their own clocks.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    cartesian_ctc_fkm_step, gains_from_bandwidth, joint_ctc_step, joint_inertia, single_axis_step, vision_ctc_step,
    ControlFlags, ControlOutput, ControllerKind, ControllerState, GainForm, JointSetpoint, LoopSettings,
    VisionFeedback,
};
use crate::dynamics::{forward_dynamics, MachineParams, Torques};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, inverse_kinematics, reachable, GeomParams, Pose, Vec3};
use crate::sensors::{encoder_read, EncoderConfig, VisionConfig, VisionSensor};
use crate::trajectory::Path;

/// Random identification error applied to the controller's model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Offset bound on every length, meters.
    pub geom_tolerance: f64,
    /// Relative bound on every mass and inertia.
    pub dyn_tolerance: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Identification::Classical.spec(0)
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.geom_tolerance >= 0.0) || !(self.dyn_tolerance >= 0.0) || self.dyn_tolerance >= 1.0 {
            return Err(Error::Config(format!(
                "perturbation tolerances must satisfy geom >= 0 and 0 <= dyn < 1 (got {}, {})",
                self.geom_tolerance, self.dyn_tolerance
            )));
        }
        Ok(())
    }
}

/// Named identification quality levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identification {
    Perfect,
    Classical,
    Accurate,
}

impl Identification {
    pub fn spec(self, seed: u64) -> PerturbationSpec {
        let (geom_tolerance, dyn_tolerance) = match self {
            Identification::Perfect => (0.0, 0.0),
            Identification::Classical => (100e-6, 0.10),
            Identification::Accurate => (10e-6, 0.01),
        };
        PerturbationSpec {
            geom_tolerance,
            dyn_tolerance,
            seed,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Identification::Perfect => "perfect",
            Identification::Classical => "classical",
            Identification::Accurate => "accurate",
        }
    }
}

/// Offsets every length and scales every mass by seeded uniform draws.
pub fn perturb_params(truth: &MachineParams, spec: &PerturbationSpec) -> MachineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // keep clear of the per-sample streams the vision sensor uses
    rng.set_stream(u64::MAX);
    let mut offset = |bound: f64| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let mut p = *truth;
    p.geom.d4 += offset(spec.geom_tolerance);
    p.geom.d6 += offset(spec.geom_tolerance);
    p.geom.a += offset(spec.geom_tolerance);
    let d = &mut p.dynamics;
    d.m_platform *= 1.0 + offset(spec.dyn_tolerance);
    for i in 0..3 {
        d.m_foot[i] *= 1.0 + offset(spec.dyn_tolerance);
        d.m_bar[i] *= 1.0 + offset(spec.dyn_tolerance);
        d.rod_inertia[i] *= 1.0 + offset(spec.dyn_tolerance);
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Closed-loop bandwidth, Hz.
    pub bandwidth: f64,
    /// Multiplier on the bandwidth, for reduced-gain studies.
    pub gain_scale: f64,
    pub gain_form: GainForm,
    /// Error-rate filter cut-off, Hz.
    pub derivative_cutoff: f64,
    pub integral_bound: Option<f64>,
    pub torque_limit: Option<f64>,
    /// Per-actuator inertia for the independent-axis PID, kg. Defaults to the
    /// reflected inertia of the model at the path start.
    pub axis_inertia: Option<[f64; 3]>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::VisionCtc,
            bandwidth: 6.0,
            gain_scale: 1.0,
            gain_form: GainForm::Pid,
            derivative_cutoff: 50.0,
            integral_bound: None,
            torque_limit: None,
            axis_inertia: None,
        }
    }
}

impl ControllerConfig {
    pub fn settings(&self) -> LoopSettings {
        LoopSettings {
            gains: gains_from_bandwidth(self.bandwidth * self.gain_scale, self.gain_form),
            derivative_cutoff: self.derivative_cutoff,
            integral_bound: self.integral_bound,
            torque_limit: self.torque_limit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) || !(self.gain_scale > 0.0) {
            return Err(Error::Config("controller bandwidth and gain_scale must be > 0".into()));
        }
        if !(self.derivative_cutoff > 0.0) {
            return Err(Error::Config("controller derivative_cutoff must be > 0".into()));
        }
        if self.integral_bound.is_some_and(|b| !(b >= 0.0)) || self.torque_limit.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("integral_bound must be >= 0 and torque_limit > 0".into()));
        }
        if self.axis_inertia.is_some_and(|m| m.iter().any(|v| !(*v > 0.0))) {
            return Err(Error::Config("axis_inertia entries must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Controller update rate, Hz.
    pub control_rate: f64,
    /// Plant integration step, s.
    pub plant_dt: f64,
    /// Logged duration, s. Defaults to the path duration.
    pub duration: Option<f64>,
    /// Time spent holding the start pose before logging begins, s.
    pub settle_time: f64,
    /// Half-width of the divergence box around the workspace centre, in units of `d4`.
    pub divergence_box: f64,
    /// Fraction of a control period ahead of the sample instant at which the
    /// model-based laws evaluate their feedforward.
    pub feedforward_lead: f64,
    pub seed: u64,
    pub controller: ControllerConfig,
    pub encoder: EncoderConfig,
    pub vision: VisionConfig,
    pub plant: MachineParams,
    pub identification: PerturbationSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_rate: 400.0,
            plant_dt: 1e-4,
            duration: None,
            settle_time: 1.0,
            divergence_box: 2.0,
            feedforward_lead: 0.5,
            seed: 0,
            controller: ControllerConfig::default(),
            encoder: EncoderConfig::default(),
            vision: VisionConfig::default(),
            plant: MachineParams::default(),
            identification: PerturbationSpec::default(),
        }
    }
}

fn is_integer(x: f64) -> bool {
    (x - x.round()).abs() <= 1e-9 * x.abs().max(1.0)
}

impl SimConfig {
    /// Uses `seed` for the model perturbation and for the sensor noise.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.vision.seed = seed;
        self.identification.seed = seed;
        self
    }

    pub fn control_period(&self) -> f64 {
        1.0 / self.control_rate
    }

    /// Plant substeps per control period.
    pub fn substeps(&self) -> usize {
        (1.0 / (self.control_rate * self.plant_dt)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control_rate > 0.0) || !(self.plant_dt > 0.0) {
            return Err(Error::Config("control_rate and plant_dt must be > 0".into()));
        }
        let ratio = 1.0 / (self.control_rate * self.plant_dt);
        if ratio < 1.0 - 1e-9 {
            return Err(Error::Config(format!(
                "plant_dt {} exceeds the control period {}",
                self.plant_dt,
                self.control_period()
            )));
        }
        if !is_integer(ratio) {
            return Err(Error::Config(format!(
                "control period {} is not an integer multiple of plant_dt {}",
                self.control_period(),
                self.plant_dt
            )));
        }
        if !(self.settle_time >= 0.0) || !(self.divergence_box > 0.0) {
            return Err(Error::Config("settle_time must be >= 0 and divergence_box > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.feedforward_lead) {
            return Err(Error::Config("feedforward_lead must lie in [0, 1]".into()));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0) {
                return Err(Error::Config(format!("duration must be > 0 (got {d})")));
            }
        }
        self.controller.validate()?;
        self.encoder.validate()?;
        self.vision.validate()?;
        let per_sample = 1.0 / (self.vision.rate * self.plant_dt);
        if self.controller.kind.uses_vision() && !is_integer(per_sample) {
            return Err(Error::Config(format!(
                "vision period {} is not an integer multiple of plant_dt",
                self.vision.period()
            )));
        }
        self.plant.validate()?;
        self.identification.validate()
    }

    /// Number of logged control periods for a path.
    pub fn log_intervals(&self, path: &Path) -> usize {
        let periods = self.duration.unwrap_or(path.duration()) * self.control_rate;
        if is_integer(periods) {
            periods.round() as usize
        } else {
            periods.ceil() as usize
        }
    }
}

/// One logged control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub reference: Vec3,
    pub truth: Vec3,
    /// Pose the controller's feedback is built on (NaN when there is none).
    pub measured: Vec3,
    pub q: Vec3,
    pub torque: Vec3,
    pub flags: u8,
}

impl SimRecord {
    pub fn error(&self) -> Vec3 {
        self.truth - self.reference
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub controller: ControllerKind,
    pub control_rate: f64,
    pub records: Vec<SimRecord>,
}

pub const LOG_HEADER: &str =
    "t,ref_x,ref_y,ref_z,true_x,true_y,true_z,meas_x,meas_y,meas_z,q1,q2,q3,tau1,tau2,tau3,flags";

impl SimLog {
    /// CSV export, SI units, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{LOG_HEADER}")?;
        for r in &self.records {
            write!(w, "{:.16e}", r.t)?;
            for v in [&r.reference, &r.truth, &r.measured, &r.q, &r.torque] {
                for x in v.iter() {
                    write!(w, ",{x:.16e}")?;
                }
            }
            writeln!(w, ",{}", r.flags)?;
        }
        Ok(())
    }

    pub fn max_error(&self) -> f64 {
        self.records.iter().map(|r| r.error().norm()).fold(0.0, f64::max)
    }
}

/// One RK4 step of the plant under a constant torque.
pub fn rk4_step(pose: &Pose, vel: &Vec3, torques: &Torques, h: f64, plant: &MachineParams) -> Result<(Pose, Vec3)> {
    let x0 = pose.to_vector();
    let f = |x: &Vec3, v: &Vec3| forward_dynamics(&Pose::from_vector(x), v, torques, plant);
    let a1 = f(&x0, vel)?;
    let (x2, v2) = (x0 + 0.5 * h * vel, vel + 0.5 * h * a1);
    let a2 = f(&x2, &v2)?;
    let (x3, v3) = (x0 + 0.5 * h * v2, vel + 0.5 * h * a2);
    let a3 = f(&x3, &v3)?;
    let (x4, v4) = (x0 + h * v3, vel + h * a3);
    let a4 = f(&x4, &v4)?;
    let x = x0 + h / 6.0 * (vel + 2.0 * v2 + 2.0 * v3 + v4);
    let v = vel + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
    Ok((Pose::from_vector(&x), v))
}

/// Integrates the plant under a constant torque; returns the state after every step.
pub fn simulate_open_loop(
    pose: Pose,
    vel: Vec3,
    torques: &Torques,
    duration: f64,
    h: f64,
    plant: &MachineParams,
) -> Result<Vec<(f64, Pose, Vec3)>> {
    let steps = (duration / h).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let (mut x, mut v) = (pose, vel);
    out.push((0.0, x, v));
    for k in 1..=steps {
        (x, v) = rk4_step(&x, &v, torques, h, plant)?;
        out.push((k as f64 * h, x, v));
    }
    Ok(out)
}

fn check_state(t: f64, pose: &Pose, vel: &Vec3, geom: &GeomParams, half_width: f64) -> Result<()> {
    let diverged = |reason: String| Err(Error::SimDiverged { t, reason });
    if !pose.to_vector().iter().chain(vel.iter()).all(|v| v.is_finite()) {
        return diverged("non-finite state".into());
    }
    let offset = pose.to_vector() - geom.workspace_center().to_vector();
    if offset.amax() > half_width {
        return diverged(format!("pose left the safety box (offset {:.6} m)", offset.amax()));
    }
    if !reachable(pose, geom) {
        return diverged(format!(
            "pose ({:.6}, {:.6}, {:.6}) unreachable",
            pose.x, pose.y, pose.z
        ));
    }
    Ok(())
}

/// Runs the closed loop along `path` and logs every control instant of the path.
pub fn run_simulation(cfg: &SimConfig, path: &Path) -> Result<SimLog> {
    cfg.validate()?;
    let plant = cfg.plant;
    let model = perturb_params(&plant, &cfg.identification);
    let settings = cfg.controller.settings();
    let kind = cfg.controller.kind;
    let rate = cfg.control_rate;
    let substeps = cfg.substeps();
    let h = 1.0 / (rate * substeps as f64);
    let dt = 1.0 / rate;
    let settle = (cfg.settle_time * rate).round() as usize;
    let intervals = cfg.log_intervals(path);
    let half_width = cfg.divergence_box * plant.geom.d4;

    let start = path.start_pose();
    let inertia = match cfg.controller.axis_inertia {
        Some(m) => Vec3::from(m),
        None if kind == ControllerKind::SingleAxis => joint_inertia(&start, &model)?,
        None => Vec3::zeros(),
    };
    let mut state = ControllerState::for_settings(&settings);
    let mut vision = VisionSensor::new(cfg.vision);
    let blur = cfg.vision.blur_gain != 0.0;

    let (mut pose, mut vel) = (start, Vec3::zeros());
    let mut held = Torques::zero();
    let mut records = Vec::with_capacity(intervals + 1);

    // Sensor clock starts at the beginning of the settle phase; path time lags it by `settle` periods.
    let clock = |k: usize, s: usize| (k * substeps + s) as f64 * h;
    let path_time = |clock: f64| clock - settle as f64 * dt;
    let sense = |vision: &mut VisionSensor, tau: f64, pose: &Pose, vel: &Vec3, held: &Torques| -> Result<()> {
        if kind.uses_vision() && vision.is_sample_instant(tau) {
            let acc = if blur {
                forward_dynamics(pose, vel, held, &plant).map_err(|e| Error::SimDiverged {
                    t: path_time(tau),
                    reason: e.to_string(),
                })?
            } else {
                Vec3::zeros()
            };
            vision.record(tau, *pose, acc);
        }
        Ok(())
    };

    for k in 0..=settle + intervals {
        let tau = clock(k, 0);
        let t = path_time(tau);
        sense(&mut vision, tau, &pose, &vel, &held)?;
        let sp = path.sample_clamped(t);
        let ahead = path.sample_clamped(t + cfg.feedforward_lead * dt);
        let q_true = inverse_kinematics(&pose, &plant.geom).map_err(|e| Error::SimDiverged {
            t,
            reason: e.to_string(),
        })?;
        let q_meas = encoder_read(&q_true, &cfg.encoder);

        let (out, measured): (ControlOutput, Vec3) = match kind {
            ControllerKind::SingleAxis | ControllerKind::JointCtc => {
                let estimate = forward_kinematics(&q_meas, &model.geom)
                    .map(|p| p.to_vector())
                    .unwrap_or(Vec3::repeat(f64::NAN));
                let targets = JointSetpoint::from_cartesian(&sp, &model.geom)
                    .and_then(|js| Ok((js, JointSetpoint::from_cartesian(&ahead, &model.geom)?)));
                let out = match targets {
                    Ok((js, _)) if kind == ControllerKind::SingleAxis => {
                        single_axis_step(&js.q, &q_meas, tau, dt, &mut state, &settings, &inertia)
                    }
                    Ok((js, lead)) => joint_ctc_step(&js, &lead, &q_meas, tau, dt, &mut state, &settings, &model),
                    Err(err) => ControlOutput {
                        torques: state.last_torque(),
                        flags: ControlFlags {
                            fault: true,
                            ..ControlFlags::default()
                        },
                        cause: Some(err),
                    },
                };
                (out, estimate)
            }
            ControllerKind::CartesianCtcFkm => {
                let estimate = forward_kinematics(&q_meas, &model.geom)
                    .map(|p| p.to_vector())
                    .unwrap_or(Vec3::repeat(f64::NAN));
                (
                    cartesian_ctc_fkm_step(&sp, &ahead, &q_meas, tau, dt, &mut state, &settings, &model),
                    estimate,
                )
            }
            ControllerKind::VisionCtc => {
                let feedback = vision.read(tau).ok().map(|m| VisionFeedback {
                    measurement: m,
                    reference: path.sample_clamped(path_time(m.timestamp)),
                });
                let measured = feedback.map_or(Vec3::repeat(f64::NAN), |f| f.measurement.value);
                (
                    vision_ctc_step(&ahead, feedback.as_ref(), tau, dt, &mut state, &settings, &model),
                    measured,
                )
            }
        };

        if k >= settle {
            records.push(SimRecord {
                t: (k - settle) as f64 / rate,
                reference: sp.pose.to_vector(),
                truth: pose.to_vector(),
                measured,
                q: q_true.to_vector(),
                torque: out.torques.0,
                flags: out.flags.bits(),
            });
        }
        if k == settle + intervals {
            break;
        }

        held = out.torques;
        for s in 1..=substeps {
            let t_sub = path_time(clock(k, s));
            (pose, vel) = rk4_step(&pose, &vel, &held, h, &plant).map_err(|e| Error::SimDiverged {
                t: t_sub,
                reason: e.to_string(),
            })?;
            check_state(t_sub, &pose, &vel, &plant.geom, half_width)?;
            if s < substeps {
                sense(&mut vision, clock(k, s), &pose, &vel, &held)?;
            }
        }
    }

    Ok(SimLog {
        controller: kind,
        control_rate: rate,
        records,
    })
}

/// Error statistics of a run, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean of the Euclidean tracking error.
    pub static_accuracy: f64,
    /// Standard deviation of the Euclidean tracking error.
    pub dynamic_accuracy: f64,
    pub max_error: f64,
    /// Per-axis mean of the absolute error.
    pub axis_static: [f64; 3],
    /// Per-axis standard deviation of the absolute error.
    pub axis_dynamic: [f64; 3],
    pub axis_max: [f64; 3],
    pub samples: usize,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population mean, standard deviation and maximum of `‖X_true − X_ref‖`
/// over the records with `t ≥ settle_skip`.
pub fn compute_metrics(log: &SimLog, settle_skip: f64) -> Result<Metrics> {
    let window: Vec<&SimRecord> = log.records.iter().filter(|r| r.t >= settle_skip).collect();
    if window.is_empty() {
        return Err(Error::EmptyWindow { skip: settle_skip });
    }
    let norms = window.iter().map(|r| r.error().norm());
    let (static_accuracy, dynamic_accuracy) = mean_std(norms.clone());
    let mut axis_static = [0.0; 3];
    let mut axis_dynamic = [0.0; 3];
    let mut axis_max = [0.0; 3];
    for i in 0..3 {
        let abs = window.iter().map(move |r| r.error()[i].abs());
        (axis_static[i], axis_dynamic[i]) = mean_std(abs.clone());
        axis_max[i] = abs.fold(0.0, f64::max);
    }
    Ok(Metrics {
        static_accuracy,
        dynamic_accuracy,
        max_error: norms.fold(0.0, f64::max),
        axis_static,
        axis_dynamic,
        axis_max,
        samples: window.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{mechanical_energy, DynParams};
    use crate::kinematics::sample_interior_pose;
    use crate::trajectory::PathSpec;

    fn circle60() -> Path {
        let geom = GeomParams::default();
        PathSpec::circle(0.03, geom.workspace_center(), 3.0)
            .with_speed_limit(0.2)
            .build(&geom)
            .unwrap()
    }

    fn perfect(kind: ControllerKind) -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.controller.kind = kind;
        cfg.encoder.resolution = 0.0;
        cfg.vision = VisionConfig::ideal(400.0);
        cfg.identification = Identification::Perfect.spec(0);
        cfg.settle_time = 0.0;
        cfg
    }

    #[test]
    fn perturbation_bounds_and_determinism() {
        let truth = MachineParams::default();
        assert_eq!(perturb_params(&truth, &Identification::Perfect.spec(5)), truth);
        for seed in 0..50 {
            let spec = Identification::Classical.spec(seed);
            let p = perturb_params(&truth, &spec);
            assert!((p.geom.d4 - truth.geom.d4).abs() <= 100e-6);
            assert!((p.geom.d6 - truth.geom.d6).abs() <= 100e-6);
            let r = p.dynamics.m_platform / truth.dynamics.m_platform;
            assert!((0.9..=1.1).contains(&r));
            for i in 0..3 {
                assert!((p.dynamics.m_foot[i] / truth.dynamics.m_foot[i] - 1.0).abs() <= 0.1);
            }
            assert_eq!(p, perturb_params(&truth, &spec));
        }
        assert_ne!(
            perturb_params(&truth, &Identification::Classical.spec(1)),
            perturb_params(&truth, &Identification::Classical.spec(2))
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.plant_dt = 1.0 / 300.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.plant_dt = 0.7e-4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.plant_dt = 1.0 / 400.0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn row_count_and_spacing() {
        let path = circle60();
        let log = run_simulation(&perfect(ControllerKind::CartesianCtcFkm), &path).unwrap();
        let n = (path.duration() * 400.0).ceil() as usize;
        assert_eq!(log.records.len(), n + 1);
        for (k, r) in log.records.iter().enumerate() {
            assert_eq!(r.t, k as f64 / 400.0);
        }
    }

    #[test]
    fn perfect_vision_loop_tracks_circle() {
        let log = run_simulation(&perfect(ControllerKind::VisionCtc), &circle60()).unwrap();
        assert!(log.max_error() < 1e-6, "{}", log.max_error());
    }

    #[test]
    fn perfect_encoder_loops_track_circle() {
        for kind in [ControllerKind::JointCtc, ControllerKind::CartesianCtcFkm] {
            let log = run_simulation(&perfect(kind), &circle60()).unwrap();
            assert!(log.max_error() < 1e-6, "{kind}: {}", log.max_error());
        }
    }

    #[test]
    fn one_period_latency_stays_stable() {
        let mut cfg = perfect(ControllerKind::VisionCtc);
        cfg.vision.latency = cfg.vision.period();
        let log = run_simulation(&cfg, &circle60()).unwrap();
        assert!(log.max_error() < 1e-4, "{}", log.max_error());
        let tail = &log.records[log.records.len() - 10..];
        assert!(tail.iter().all(|r| r.error().norm() < 1e-4));
    }

    #[test]
    fn ideal_vision_equals_perfect_encoder_fkm() {
        let path = circle60();
        let a = run_simulation(&perfect(ControllerKind::VisionCtc), &path).unwrap();
        let b = run_simulation(&perfect(ControllerKind::CartesianCtcFkm), &path).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert!((ra.truth - rb.truth).norm() < 1e-9);
        }
    }

    #[test]
    fn deterministic_logs() {
        let path = circle60();
        let mut cfg = SimConfig::default().with_seed(11);
        cfg.settle_time = 0.1;
        let render = |cfg: &SimConfig| {
            let mut buf = Vec::new();
            run_simulation(cfg, &path).unwrap().write_csv(&mut buf).unwrap();
            buf
        };
        let a = render(&cfg);
        assert_eq!(a, render(&cfg));
        assert_ne!(a, render(&cfg.with_seed(12)));
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    }

    #[test]
    fn refinement_convergence() {
        let path = circle60();
        let coarse = perfect(ControllerKind::CartesianCtcFkm);
        let fine = SimConfig {
            plant_dt: coarse.plant_dt / 2.0,
            ..coarse
        };
        let a = run_simulation(&coarse, &path).unwrap();
        let b = run_simulation(&fine, &path).unwrap();
        let (ra, rb) = (a.records.last().unwrap(), b.records.last().unwrap());
        assert!((ra.truth - rb.truth).norm() < 1e-8);
    }

    #[test]
    fn torque_is_held_between_instants() {
        // with a constant torque the open-loop integrator and one control period agree
        let p = MachineParams::default();
        let pose = p.geom.workspace_center();
        let tq = Torques(Vec3::new(10.0, -5.0, 30.0));
        let a = simulate_open_loop(pose, Vec3::zeros(), &tq, 0.0025, 1e-4, &p).unwrap();
        let (mut x, mut v) = (pose, Vec3::zeros());
        for _ in 0..25 {
            (x, v) = rk4_step(&x, &v, &tq, 1e-4, &p).unwrap();
        }
        assert_eq!(a.last().unwrap().1, x);
        assert_eq!(a.last().unwrap().2, v);
    }

    #[test]
    fn free_point_mass_moves_in_a_line() {
        let p = MachineParams {
            geom: GeomParams::default(),
            dynamics: DynParams {
                gravity: [0.0; 3],
                ..DynParams::default().massless_legs()
            },
        };
        let pose = p.geom.workspace_center();
        let v0 = Vec3::new(0.05, -0.03, 0.02);
        let traj = simulate_open_loop(pose, v0, &Torques::zero(), 0.5, 1e-4, &p).unwrap();
        for (t, x, v) in traj {
            assert!((x.to_vector() - (pose.to_vector() + t * v0)).norm() < 1e-12);
            assert!((v - v0).norm() < 1e-12);
        }
    }

    #[test]
    fn free_motion_conserves_energy() {
        let p = MachineParams {
            geom: GeomParams::default(),
            dynamics: DynParams {
                gravity: [0.0; 3],
                ..DynParams::default()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pose = sample_interior_pose(&mut rng, &p.geom, 0.2 * p.geom.d4);
        let v0 = Vec3::new(0.02, 0.01, -0.015);
        let e0 = mechanical_energy(&pose, &v0, &p).unwrap();
        let traj = simulate_open_loop(pose, v0, &Torques::zero(), 0.5, 1e-4, &p).unwrap();
        let (_, x, v) = traj.last().unwrap();
        let e1 = mechanical_energy(x, v, &p).unwrap();
        assert!(((e1 - e0) / e0).abs() < 1e-5);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = perfect(ControllerKind::CartesianCtcFkm);
        cfg.controller.gain_scale = 1.0;
        cfg.controller.torque_limit = Some(1e-3);
        cfg.duration = Some(5.0);
        // gravity wins against a 1 mN actuator limit and the platform falls out of the workspace
        let err = run_simulation(&cfg, &circle60()).unwrap_err();
        assert!(matches!(err, Error::SimDiverged { .. }), "{err:?}");
    }

    fn synthetic(errors: &[Vec3]) -> SimLog {
        SimLog {
            controller: ControllerKind::VisionCtc,
            control_rate: 400.0,
            records: errors
                .iter()
                .enumerate()
                .map(|(k, e)| SimRecord {
                    t: k as f64 / 400.0,
                    reference: Vec3::new(0.0, 0.0, 0.2),
                    truth: Vec3::new(0.0, 0.0, 0.2) + e,
                    measured: Vec3::zeros(),
                    q: Vec3::zeros(),
                    torque: Vec3::zeros(),
                    flags: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn metrics_definitions() {
        let zero = compute_metrics(&synthetic(&[Vec3::zeros(); 5]), 0.0).unwrap();
        assert_eq!(
            (zero.static_accuracy, zero.dynamic_accuracy, zero.max_error),
            (0.0, 0.0, 0.0)
        );

        let e = Vec3::new(3e-6, 4e-6, 0.0);
        let m = compute_metrics(&synthetic(&[e; 8]), 0.0).unwrap();
        assert!((m.static_accuracy - 5e-6).abs() < 1e-18);
        assert!(m.dynamic_accuracy < 1e-18);

        let errs = [1.0, 2.0, 4.0, 7.0].map(|v| Vec3::new(0.0, v * 1e-6, 0.0));
        let m = compute_metrics(&synthetic(&errs), 0.0).unwrap();
        // mean 3.5, population variance (6.25 + 2.25 + 0.25 + 12.25) / 4 = 5.25
        assert!((m.static_accuracy - 3.5e-6).abs() < 1e-12 * 1e-6);
        assert!((m.dynamic_accuracy - 5.25f64.sqrt() * 1e-6).abs() < 1e-12 * 1e-6);
        assert_eq!(m.max_error, 7e-6);
        assert!(m.max_error >= m.static_accuracy);

        let m = compute_metrics(&synthetic(&errs), 2.0 / 400.0).unwrap();
        assert_eq!(m.samples, 2);
        assert!(matches!(
            compute_metrics(&synthetic(&errs), 1.0),
            Err(Error::EmptyWindow { .. })
        ));
    }
}
