//! The four position controllers: independent joint PID, joint-space and
//! Cartesian-space computed torque, and computed torque closed on a direct
//! pose measurement. All share one PID law tuned from a bandwidth.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    cartesian_mass_matrix, inverse_dynamics_cartesian, inverse_dynamics_joint, CartesianState, MachineParams, Torques,
};
use crate::error::{Error, Result};
use crate::kinematics::{
    d_forward, d_inv, d_inv_dot, forward_kinematics, inverse_kinematics, ActiveJoints, GeomParams, Pose, Vec3,
};
use crate::sensors::{DerivativeFilter, Measurement};
use crate::trajectory::Setpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    SingleAxis,
    JointCtc,
    CartesianCtcFkm,
    VisionCtc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::SingleAxis,
        ControllerKind::JointCtc,
        ControllerKind::CartesianCtcFkm,
        ControllerKind::VisionCtc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::SingleAxis => "single_axis",
            ControllerKind::JointCtc => "joint_ctc",
            ControllerKind::CartesianCtcFkm => "cartesian_ctc_fkm",
            ControllerKind::VisionCtc => "vision_ctc",
        }
    }

    /// Whether the controller reads the pose sensor instead of the encoders.
    pub fn uses_vision(self) -> bool {
        self == ControllerKind::VisionCtc
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainForm {
    Pd,
    Pid,
}

/// Feedback gains in acceleration units (`kp` 1/s², `kd` 1/s, `ki` 1/s³).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
    pub ki: f64,
}

/// All closed-loop poles of the double-integrator error dynamics at `-2πf`.
pub fn gains_from_bandwidth(f: f64, form: GainForm) -> Gains {
    let w = std::f64::consts::TAU * f.max(0.0);
    match form {
        GainForm::Pid => Gains {
            kp: 3.0 * w * w,
            kd: 3.0 * w,
            ki: w * w * w,
        },
        GainForm::Pd => Gains {
            kp: w * w,
            kd: 2.0 * w,
            ki: 0.0,
        },
    }
}

impl Gains {
    pub fn validate(&self) -> Result<()> {
        if [self.kp, self.kd, self.ki].iter().all(|g| g.is_finite() && *g >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("gains must be finite and >= 0 (got {self:?})")))
        }
    }
}

/// Everything the feedback law needs besides the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopSettings {
    pub gains: Gains,
    /// Cut-off of the error-rate filter, Hz.
    pub derivative_cutoff: f64,
    /// Bound on the norm of the error integral, if any.
    pub integral_bound: Option<f64>,
    /// Symmetric actuator force limit, N, if any.
    pub torque_limit: Option<f64>,
}

impl LoopSettings {
    pub fn new(gains: Gains) -> Self {
        Self {
            gains,
            derivative_cutoff: 50.0,
            integral_bound: None,
            torque_limit: None,
        }
    }
}

/// Status bits attached to every controller output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControlFlags {
    /// The model could not be evaluated; the previous torque was re-issued.
    pub fault: bool,
    /// No feedback was available; only the feedforward was applied.
    pub feedforward_only: bool,
    /// The torque hit the actuator limit.
    pub saturated: bool,
}

impl ControlFlags {
    pub fn bits(&self) -> u8 {
        self.fault as u8 | (self.feedforward_only as u8) << 1 | (self.saturated as u8) << 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub torques: Torques,
    pub flags: ControlFlags,
    /// The error behind a fault or a feedforward-only step.
    pub cause: Option<Error>,
}

/// Integral, error-rate filter and the last issued torque.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    integral: Vec3,
    error_rate: DerivativeFilter,
    last_torque: Torques,
    saturated: bool,
    last_measurement: Option<Measurement>,
}

impl ControllerState {
    pub fn new(derivative_cutoff: f64) -> Self {
        Self {
            integral: Vec3::zeros(),
            error_rate: DerivativeFilter::new(derivative_cutoff),
            last_torque: Torques::zero(),
            saturated: false,
            last_measurement: None,
        }
    }

    pub fn for_settings(settings: &LoopSettings) -> Self {
        Self::new(settings.derivative_cutoff)
    }

    pub fn reset(&mut self) {
        self.integral = Vec3::zeros();
        self.error_rate.reset();
        self.last_torque = Torques::zero();
        self.saturated = false;
        self.last_measurement = None;
    }

    pub fn integral(&self) -> Vec3 {
        self.integral
    }

    pub fn last_torque(&self) -> Torques {
        self.last_torque
    }

    pub fn last_measurement(&self) -> Option<&Measurement> {
        self.last_measurement.as_ref()
    }

    /// Advances integral and rate filter on error `e` sampled at `t`; returns
    /// the feedback term and the filtered error rate.
    fn feedback(&mut self, e: &Vec3, t: f64, dt: f64, settings: &LoopSettings) -> (Vec3, Vec3) {
        let rate = self.error_rate.update(t, e).unwrap_or_else(|_| Vec3::zeros());
        if !self.saturated {
            self.integral += e * dt;
        }
        if let Some(bound) = settings.integral_bound {
            let n = self.integral.norm();
            if n > bound {
                self.integral *= bound / n;
            }
        }
        let g = &settings.gains;
        (g.kp * e + g.kd * rate + g.ki * self.integral, rate)
    }

    fn issue(&mut self, mut torques: Torques, settings: &LoopSettings, mut flags: ControlFlags) -> ControlOutput {
        flags.saturated = settings.torque_limit.is_some_and(|l| torques.clamp(l));
        self.saturated = flags.saturated;
        self.last_torque = torques;
        ControlOutput {
            torques,
            flags,
            cause: None,
        }
    }

    fn hold(&self, cause: Error) -> ControlOutput {
        ControlOutput {
            torques: self.last_torque,
            flags: ControlFlags {
                fault: true,
                ..ControlFlags::default()
            },
            cause: Some(cause),
        }
    }
}

/// Desired actuated joint motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSetpoint {
    pub q: ActiveJoints,
    pub qd: Vec3,
    pub qdd: Vec3,
}

impl JointSetpoint {
    /// Maps a Cartesian setpoint through the (model) kinematics.
    pub fn from_cartesian(sp: &Setpoint, geom: &GeomParams) -> Result<Self> {
        let q = inverse_kinematics(&sp.pose, geom)?;
        let m = d_inv(&sp.pose, geom)?;
        let mdot = d_inv_dot(&sp.pose, &sp.vel, geom)?;
        Ok(Self {
            q,
            qd: m * sp.vel,
            qdd: m * sp.acc + mdot * sp.vel,
        })
    }
}

/// Reflected inertia of each actuator, the diagonal of `Dᵀ A_c D`.
pub fn joint_inertia(pose: &Pose, model: &MachineParams) -> Result<Vec3> {
    let d = d_forward(pose, &model.geom)?;
    let m = d.transpose() * cartesian_mass_matrix(pose, model)? * d;
    Ok(m.diagonal())
}

/// Independent PID per actuator, scaled by a per-axis inertia; no model terms.
pub fn single_axis_step(
    setpoint: &ActiveJoints,
    measured: &ActiveJoints,
    t: f64,
    dt: f64,
    state: &mut ControllerState,
    settings: &LoopSettings,
    inertia: &Vec3,
) -> ControlOutput {
    let e = setpoint.to_vector() - measured.to_vector();
    let (u, _) = state.feedback(&e, t, dt, settings);
    state.issue(Torques(inertia.component_mul(&u)), settings, ControlFlags::default())
}

/// Computed torque in joint space. The error is formed against `reference`
/// (the setpoint at the measurement instant) and the model is evaluated on
/// `setpoint` shifted by that error; both are the same unless a lead is used.
pub fn joint_ctc_step(
    reference: &JointSetpoint,
    setpoint: &JointSetpoint,
    measured: &ActiveJoints,
    t: f64,
    dt: f64,
    state: &mut ControllerState,
    settings: &LoopSettings,
    model: &MachineParams,
) -> ControlOutput {
    let mut next = state.clone();
    let e = reference.q.to_vector() - measured.to_vector();
    let (u, rate) = next.feedback(&e, t, dt, settings);
    let q_hat = ActiveJoints::from_vector(&(setpoint.q.to_vector() - e));
    match inverse_dynamics_joint(&q_hat, &(setpoint.qd - rate), &(setpoint.qdd + u), model) {
        Ok(torques) => {
            *state = next;
            state.issue(torques, settings, ControlFlags::default())
        }
        Err(err) => state.hold(err),
    }
}

/// Computed torque in Cartesian space on a pose estimate `pose` with error `e = X_d - pose`.
fn cartesian_law(
    setpoint: &Setpoint,
    e: &Vec3,
    t: f64,
    dt: f64,
    state: &mut ControllerState,
    settings: &LoopSettings,
    model: &MachineParams,
) -> ControlOutput {
    let mut next = state.clone();
    let (u, rate) = next.feedback(e, t, dt, settings);
    let estimate = CartesianState::new(
        Pose::from_vector(&(setpoint.pose.to_vector() - e)),
        setpoint.vel - rate,
        setpoint.acc + u,
    );
    match inverse_dynamics_cartesian(&estimate, model) {
        Ok(torques) => {
            *state = next;
            state.issue(torques, settings, ControlFlags::default())
        }
        Err(err) => state.hold(err),
    }
}

/// Computed torque in Cartesian space on the pose obtained by forward
/// kinematics; `reference` and `setpoint` as for [`joint_ctc_step`].
pub fn cartesian_ctc_fkm_step(
    reference: &Setpoint,
    setpoint: &Setpoint,
    measured: &ActiveJoints,
    t: f64,
    dt: f64,
    state: &mut ControllerState,
    settings: &LoopSettings,
    model: &MachineParams,
) -> ControlOutput {
    match forward_kinematics(measured, &model.geom) {
        Ok(pose) => {
            let e = reference.pose.to_vector() - pose.to_vector();
            cartesian_law(setpoint, &e, t, dt, state, settings, model)
        }
        Err(err) => state.hold(err),
    }
}

/// A pose measurement paired with the reference at its acquisition time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisionFeedback {
    pub measurement: Measurement,
    pub reference: Setpoint,
}

/// Computed torque closed on the pose sensor. The error is formed against the
/// reference at the acquisition instant and applied to the current setpoint,
/// so a pure delay does not show up as tracking error.
pub fn vision_ctc_step(
    setpoint: &Setpoint,
    feedback: Option<&VisionFeedback>,
    t: f64,
    dt: f64,
    state: &mut ControllerState,
    settings: &LoopSettings,
    model: &MachineParams,
) -> ControlOutput {
    let Some(fb) = feedback else {
        let ff = CartesianState::new(setpoint.pose, setpoint.vel, setpoint.acc);
        return match inverse_dynamics_cartesian(&ff, model) {
            Ok(torques) => {
                let mut out = state.issue(
                    torques,
                    settings,
                    ControlFlags {
                        feedforward_only: true,
                        ..ControlFlags::default()
                    },
                );
                out.cause = Some(Error::NotYetAvailable { t });
                out
            }
            Err(err) => state.hold(err),
        };
    };
    let e = fb.reference.pose.to_vector() - fb.measurement.value;
    let out = cartesian_law(setpoint, &e, fb.measurement.timestamp, dt, state, settings, model);
    if !out.flags.fault {
        state.last_measurement = Some(fb.measurement);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forward_dynamics, inverse_dynamics_cartesian};
    use crate::kinematics::sample_interior_pose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn params() -> MachineParams {
        MachineParams::default()
    }

    fn pid6() -> LoopSettings {
        LoopSettings::new(gains_from_bandwidth(6.0, GainForm::Pid))
    }

    fn setpoint(pose: Pose, vel: Vec3, acc: Vec3) -> Setpoint {
        Setpoint { t: 0.0, pose, vel, acc }
    }

    #[test]
    fn bandwidth_formula() {
        let w = TAU * 6.0;
        let g = gains_from_bandwidth(6.0, GainForm::Pid);
        assert_eq!((g.kd, g.kp, g.ki), (3.0 * w, 3.0 * w * w, w * w * w));
        let g = gains_from_bandwidth(6.0, GainForm::Pd);
        assert_eq!((g.kd, g.kp, g.ki), (2.0 * w, w * w, 0.0));
        let g = gains_from_bandwidth(1e-12, GainForm::Pid);
        assert!(g.kp < 1e-20 && g.kd < 1e-10 && g.ki < 1e-30);
    }

    /// Integrates `ẍ = u` in closed loop from an initial error of one, reference at zero.
    fn regulate(gains: Gains, t_end: f64) -> Vec<(f64, f64)> {
        let h = 1e-5;
        let f = |s: [f64; 3]| {
            // s = (∫e, e, ė) with e = -x
            let u = gains.kp * s[1] + gains.kd * s[2] + gains.ki * s[0];
            [s[1], s[2], -u]
        };
        let mut s = [0.0, 1.0, 0.0];
        let mut out = vec![(0.0, 1.0)];
        let n = (t_end / h) as usize;
        for k in 1..=n {
            let k1 = f(s);
            let k2 = f(std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]));
            let k3 = f(std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]));
            let k4 = f(std::array::from_fn(|i| s[i] + h * k3[i]));
            s = std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
            out.push((k as f64 * h, s[1]));
        }
        out
    }

    #[test]
    fn pd_regulation_has_no_overshoot() {
        let trace = regulate(gains_from_bandwidth(6.0, GainForm::Pd), 1.0);
        let undershoot = trace.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert!(undershoot >= -0.05);
    }

    #[test]
    fn pid_regulation_matches_triple_pole_solution() {
        // with ∫e(0) = 0, ė(0) = 0 the triple pole gives e = e^{-ωt}(1 + ωt - ω²t²)
        let w = TAU * 6.0;
        for (t, e) in regulate(gains_from_bandwidth(6.0, GainForm::Pid), 0.5)
            .into_iter()
            .step_by(997)
        {
            let u = w * t;
            assert!((e - (-u).exp() * (1.0 + u - u * u)).abs() < 1e-9);
        }
    }

    #[test]
    fn error_rejection_break_frequency() {
        // measure |S| = |e/r| by simulating the loop on sinusoidal references well below f
        let f = 6.0;
        let g = gains_from_bandwidth(f, GainForm::Pid);
        let amplitude = |freq: f64| {
            let w = TAU * freq;
            let h = 1e-4;
            let settle = 3.0;
            let t_end = settle + 4.0 / freq;
            let ddd = |s: [f64; 4], t: f64| {
                // s = (∫e, x, ẋ, unused)
                let r = (w * t).sin();
                let rd = w * (w * t).cos();
                let e = r - s[1];
                let u = g.kp * e + g.kd * (rd - s[2]) + g.ki * s[0];
                [e, s[2], u, 0.0]
            };
            let mut s = [0.0; 4];
            let mut t = 0.0;
            let mut peak = 0.0f64;
            while t < t_end {
                let k1 = ddd(s, t);
                let k2 = ddd(std::array::from_fn(|i| s[i] + 0.5 * h * k1[i]), t + 0.5 * h);
                let k3 = ddd(std::array::from_fn(|i| s[i] + 0.5 * h * k2[i]), t + 0.5 * h);
                let k4 = ddd(std::array::from_fn(|i| s[i] + h * k3[i]), t + h);
                s = std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
                t += h;
                if t > settle {
                    peak = peak.max(((w * t).sin() - s[1]).abs());
                }
            }
            peak
        };
        // low-frequency asymptote |S| ≈ (F/f_c)^3; intersect it with 0 dB
        let probe = 0.3;
        let corner = probe / amplitude(probe).cbrt();
        assert!((corner - f).abs() <= 0.2 * f, "{corner}");
    }

    #[test]
    fn single_axis_zero_error_and_decoupling() {
        let settings = pid6();
        let mut state = ControllerState::for_settings(&settings);
        let q = ActiveJoints::new(0.1, 0.2, 0.3);
        let out = single_axis_step(&q, &q, 0.0, 0.0025, &mut state, &settings, &Vec3::repeat(2.0));
        assert_eq!(out.torques, Torques::zero());
        let mut state = ControllerState::for_settings(&settings);
        let measured = ActiveJoints::new(0.1 - 1e-4, 0.2, 0.3);
        for k in 0..10 {
            let out = single_axis_step(
                &q,
                &measured,
                k as f64 * 0.0025,
                0.0025,
                &mut state,
                &settings,
                &Vec3::repeat(2.0),
            );
            assert!(out.torques.0[0] > 0.0);
            assert_eq!((out.torques.0[1], out.torques.0[2]), (0.0, 0.0));
        }
    }

    #[test]
    fn windup_guard() {
        let mut settings = pid6();
        settings.integral_bound = Some(1e-4);
        settings.torque_limit = Some(1.0);
        let mut state = ControllerState::for_settings(&settings);
        let q = ActiveJoints::new(0.0, 0.0, 0.0);
        let far = ActiveJoints::new(-0.05, 0.0, 0.0);
        let mut saw_saturation = false;
        for k in 0..4000 {
            let out = single_axis_step(
                &q,
                &far,
                k as f64 * 0.0025,
                0.0025,
                &mut state,
                &settings,
                &Vec3::repeat(1.0),
            );
            saw_saturation |= out.flags.saturated;
            assert!(out.torques.0.amax() <= 1.0);
            assert!(state.integral().norm() <= 1e-4 * (1.0 + 1e-12));
        }
        assert!(saw_saturation);
        // conditional integration: saturated from the first step, so the integral froze at one sample
        assert!((state.integral()[0] - 0.05 * 0.0025).abs() < 1e-4);
    }

    #[test]
    fn joint_ctc_perfect_tracking_is_feedforward() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pose = sample_interior_pose(&mut rng, &p.geom, 0.05 * p.geom.d4);
            let sp = setpoint(pose, Vec3::new(0.1, -0.2, 0.05), Vec3::new(1.0, 2.0, -0.5));
            let js = JointSetpoint::from_cartesian(&sp, &p.geom).unwrap();
            let settings = pid6();
            let mut state = ControllerState::for_settings(&settings);
            let out = joint_ctc_step(&js, &js, &js.q, 0.0, 0.0025, &mut state, &settings, &p);
            let ff = inverse_dynamics_joint(&js.q, &js.qd, &js.qdd, &p).unwrap();
            assert_eq!(out.torques, ff);
            let acc = forward_dynamics(&pose, &sp.vel, &out.torques, &p).unwrap();
            assert!((acc - sp.acc).norm() <= 1e-8 * sp.acc.norm());
        }
    }

    #[test]
    fn joint_ctc_static_gravity_compensation() {
        let p = params();
        let pose = p.geom.workspace_center();
        let js = JointSetpoint::from_cartesian(&setpoint(pose, Vec3::zeros(), Vec3::zeros()), &p.geom).unwrap();
        let settings = pid6();
        let mut state = ControllerState::for_settings(&settings);
        let out = joint_ctc_step(&js, &js, &js.q, 0.0, 0.0025, &mut state, &settings, &p);
        assert!(out.torques.0.norm() > 1.0);
        let acc = forward_dynamics(&pose, &Vec3::zeros(), &out.torques, &p).unwrap();
        assert!(acc.norm() < 1e-10);
    }

    #[test]
    fn cartesian_zero_error_is_feedforward() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pose = sample_interior_pose(&mut rng, &p.geom, 0.05 * p.geom.d4);
            let sp = setpoint(pose, Vec3::new(-0.1, 0.2, 0.15), Vec3::new(-1.0, 0.5, 2.0));
            let q = inverse_kinematics(&pose, &p.geom).unwrap();
            let settings = pid6();
            let mut state = ControllerState::for_settings(&settings);
            let out = cartesian_ctc_fkm_step(&sp, &sp, &q, 0.0, 0.0025, &mut state, &settings, &p);
            let ff = inverse_dynamics_cartesian(&CartesianState::new(pose, sp.vel, sp.acc), &p).unwrap();
            assert!((out.torques.0 - ff.0).norm() <= 1e-9 * ff.0.norm());
            let acc = forward_dynamics(&pose, &sp.vel, &out.torques, &p).unwrap();
            assert!((acc - sp.acc).norm() <= 1e-8 * sp.acc.norm());
        }
    }

    #[test]
    fn vision_without_measurement_is_feedforward_flagged() {
        let p = params();
        let sp = setpoint(p.geom.workspace_center(), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0));
        let settings = pid6();
        let mut state = ControllerState::for_settings(&settings);
        let out = vision_ctc_step(&sp, None, 0.0, 0.0025, &mut state, &settings, &p);
        assert!(out.flags.feedforward_only && out.torques.is_finite());
        assert!(matches!(out.cause, Some(Error::NotYetAvailable { .. })));
        assert_eq!(state.integral(), Vec3::zeros());
        let ff = inverse_dynamics_cartesian(&CartesianState::new(sp.pose, sp.vel, sp.acc), &p).unwrap();
        assert_eq!(out.torques, ff);
    }

    #[test]
    fn ideal_vision_matches_fkm_step() {
        let p = params();
        let pose = Pose::new(0.01, -0.02, 0.21);
        let truth = Pose::new(0.0101, -0.0199, 0.2102);
        let sp = setpoint(pose, Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        let settings = pid6();
        let (mut a, mut b) = (
            ControllerState::for_settings(&settings),
            ControllerState::for_settings(&settings),
        );
        let q = inverse_kinematics(&truth, &p.geom).unwrap();
        let fb = VisionFeedback {
            measurement: Measurement {
                value: truth.to_vector(),
                timestamp: 0.0,
                valid: true,
            },
            reference: sp,
        };
        let ta = cartesian_ctc_fkm_step(&sp, &sp, &q, 0.0, 0.0025, &mut a, &settings, &p).torques;
        let tb = vision_ctc_step(&sp, Some(&fb), 0.0, 0.0025, &mut b, &settings, &p).torques;
        assert!((ta.0 - tb.0).norm() <= 1e-9 * ta.0.norm());
    }

    #[test]
    fn fault_holds_last_torque_without_accumulating() {
        let p = params();
        let settings = pid6();
        let mut state = ControllerState::for_settings(&settings);
        let sp = setpoint(p.geom.workspace_center(), Vec3::zeros(), Vec3::zeros());
        let good = inverse_kinematics(&Pose::new(0.001, 0.0, 0.2), &p.geom).unwrap();
        let first = cartesian_ctc_fkm_step(&sp, &sp, &good, 0.0, 0.0025, &mut state, &settings, &p);
        let before = state.clone();
        let broken = ActiveJoints::new(5.0, -5.0, 5.0);
        let out = cartesian_ctc_fkm_step(&sp, &sp, &broken, 0.0025, 0.0025, &mut state, &settings, &p);
        assert!(out.flags.fault && out.torques.is_finite());
        assert_eq!(out.torques, first.torques);
        assert_eq!(state, before);
        let js = JointSetpoint::from_cartesian(&sp, &p.geom).unwrap();
        let out = joint_ctc_step(&js, &js, &broken, 0.0025, 0.0025, &mut state, &settings, &p);
        assert!(out.flags.fault);
        assert_eq!(state, before);
    }

    #[test]
    fn reset_clears_accumulators() {
        let settings = pid6();
        let mut state = ControllerState::for_settings(&settings);
        let q = ActiveJoints::new(0.0, 0.0, 0.0);
        for k in 0..5 {
            single_axis_step(
                &q,
                &ActiveJoints::new(0.01, 0.0, 0.0),
                k as f64 * 0.0025,
                0.0025,
                &mut state,
                &settings,
                &Vec3::repeat(1.0),
            );
        }
        state.reset();
        assert_eq!(state, ControllerState::for_settings(&settings));
    }

    /// Extracts (kp, kd, ki) from a controller seen through a unit double integrator.
    fn probe(
        mut accel: impl FnMut(&mut ControllerState, f64, f64) -> Vec3,
        settings: &LoopSettings,
        dt: f64,
    ) -> [f64; 3] {
        let e = 1e-4;
        // constant error from the first sample: no rate, integral grows by e·dt per step
        let mut s = ControllerState::for_settings(settings);
        let u1 = accel(&mut s, 0.0, e)[0];
        let u2 = accel(&mut s, dt, e)[0];
        let ki = (u2 - u1) / (e * dt);
        let kp = u1 / e - ki * dt;
        // error appearing at the second sample: raw rate e/dt
        let mut s = ControllerState::for_settings(settings);
        accel(&mut s, 0.0, 0.0);
        let u = accel(&mut s, dt, e)[0];
        let kd = (u / e - kp - ki * dt) * dt;
        [kp, kd, ki]
    }

    #[test]
    fn gain_consistency_across_controllers() {
        let p = params();
        let mut settings = pid6();
        settings.derivative_cutoff = f64::INFINITY;
        let dt = 0.0025;
        let pose = Pose::new(0.01, 0.02, 0.19);
        let sp = setpoint(pose, Vec3::zeros(), Vec3::zeros());
        let q0 = inverse_kinematics(&pose, &p.geom).unwrap();
        let js = JointSetpoint::from_cartesian(&sp, &p.geom).unwrap();
        let g = settings.gains;
        let expected = [g.kp, g.kd, g.ki];

        let inertia = Vec3::new(4.0, 5.0, 6.0);
        let single = probe(
            |s, t, e| {
                let measured = ActiveJoints::new(q0.q1 - e, q0.q2, q0.q3);
                single_axis_step(&q0, &measured, t, dt, s, &settings, &inertia)
                    .torques
                    .0
                    .component_div(&inertia)
            },
            &settings,
            dt,
        );
        // CTC outputs are read through the plant (= model), which makes the loop a double integrator
        let joint = probe(
            |s, t, e| {
                let shifted = JointSetpoint {
                    q: ActiveJoints::new(q0.q1 + e, q0.q2, q0.q3),
                    ..js
                };
                let out = joint_ctc_step(&shifted, &shifted, &q0, t, dt, s, &settings, &p);
                let m = d_inv(&pose, &p.geom).unwrap();
                let d = d_forward(&pose, &p.geom).unwrap();
                let qd_hat = -s.error_rate.estimate().unwrap_or_else(Vec3::zeros);
                let xd = d * qd_hat;
                let xdd = forward_dynamics(&pose, &xd, &out.torques, &p).unwrap();
                m * xdd + d_inv_dot(&pose, &xd, &p.geom).unwrap() * xd
            },
            &settings,
            dt,
        );
        let cart = |vision: bool| {
            probe(
                |s, t, e| {
                    let target = setpoint(Pose::new(pose.x + e, pose.y, pose.z), Vec3::zeros(), Vec3::zeros());
                    let out = if vision {
                        let fb = VisionFeedback {
                            measurement: Measurement {
                                value: pose.to_vector(),
                                timestamp: t,
                                valid: true,
                            },
                            reference: target,
                        };
                        vision_ctc_step(&target, Some(&fb), t, dt, s, &settings, &p)
                    } else {
                        cartesian_ctc_fkm_step(&target, &target, &q0, t, dt, s, &settings, &p)
                    };
                    let vel = -s.error_rate.estimate().unwrap_or_else(Vec3::zeros);
                    forward_dynamics(&pose, &vel, &out.torques, &p).unwrap()
                },
                &settings,
                dt,
            )
        };
        for got in [single, joint, cart(false), cart(true)] {
            for (a, b) in got.iter().zip(expected) {
                assert!((a - b).abs() <= 1e-9 * b, "{got:?} vs {expected:?}");
            }
        }
    }
}
