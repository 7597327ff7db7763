//! Cartesian-space inverse dynamic model and the plant's forward dynamics.
//!
//! The actuated forces are assembled as
//! `Γ = Dᵀ (F_P + Σ_i J_i⁻ᵀ H_i)` where `H_i` are the generalized forces of leg
//! `i` computed by a recursive Newton–Euler pass over its three joints.
//!
//! Each leg is modeled as a serial chain in its local frame: a prismatic slider
//! along the local z axis carrying `m_foot`, a revolute about `-e2`, a second
//! revolute about the rotated `-e3`, then a rigid bar of length `d4` and mass
//! `m_bar` lumped half at each end (plus an optional extra second moment about
//! its centre).

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    condition_number, d_inv, d_inv_dot, forward_kinematics, inverse_kinematics, invert_checked,
    leg_jacobian_inv_dot_from_trig, leg_jacobian_inv_from_trig, leg_local_position, leg_local_to_world, leg_trig,
    ActiveJoints, GeomParams, LegIndex, LegTrig, Mat3, Pose, Vec3,
};

/// Condition number above which the plant refuses to invert its mass matrix.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynParams {
    /// Moving platform mass, kg.
    pub m_platform: f64,
    /// Slider mass of each leg, kg.
    pub m_foot: [f64; 3],
    /// Parallelogram mass of each leg, kg.
    pub m_bar: [f64; 3],
    /// Extra bar second moment about its centre (perpendicular axes), kg·m².
    pub rod_inertia: [f64; 3],
    /// Gravity acceleration, m/s².
    pub gravity: [f64; 3],
}

impl Default for DynParams {
    fn default() -> Self {
        Self {
            m_platform: 3.0,
            m_foot: [2.0; 3],
            m_bar: [0.5; 3],
            rod_inertia: [0.0; 3],
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

impl DynParams {
    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    pub fn validate(&self) -> Result<()> {
        let masses = std::iter::once(self.m_platform)
            .chain(self.m_foot)
            .chain(self.m_bar)
            .chain(self.rod_inertia);
        let mut any_mass = false;
        for m in masses {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Config(format!(
                    "masses and inertias must be finite and >= 0 (got {m})"
                )));
            }
            any_mass |= m > 0.0;
        }
        if !any_mass {
            return Err(Error::Config("at least one mass must be positive".into()));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }

    /// Zero every leg mass, leaving a point-mass platform.
    pub fn massless_legs(mut self) -> Self {
        self.m_foot = [0.0; 3];
        self.m_bar = [0.0; 3];
        self.rod_inertia = [0.0; 3];
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineParams {
    pub geom: GeomParams,
    pub dynamics: DynParams,
}

impl MachineParams {
    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        self.dynamics.validate()
    }
}

/// Pose, velocity and acceleration of the end-effector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianState {
    pub pose: Pose,
    pub vel: Vec3,
    pub acc: Vec3,
}

impl CartesianState {
    pub fn new(pose: Pose, vel: Vec3, acc: Vec3) -> Self {
        Self { pose, vel, acc }
    }

    pub fn at_rest(pose: Pose) -> Self {
        Self::new(pose, Vec3::zeros(), Vec3::zeros())
    }
}

/// Generalized forces of the three actuated sliders, N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Torques(pub Vec3);

impl Torques {
    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Component-wise clamp to `[-limit, limit]`; returns whether anything was clipped.
    pub fn clamp(&mut self, limit: f64) -> bool {
        let mut clipped = false;
        for v in self.0.iter_mut() {
            if v.abs() > limit {
                *v = v.signum() * limit;
                clipped = true;
            }
        }
        clipped
    }
}

/// Counts the kinematic solves performed by one inverse-dynamics evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KinematicCounters {
    pub forward_kinematics: usize,
    pub passive_angle_solves: usize,
    pub trig_from_pose: usize,
}

impl KinematicCounters {
    pub fn total(&self) -> usize {
        self.forward_kinematics + self.passive_angle_solves + self.trig_from_pose
    }
}

/// End-effector dynamics `m_platform (ẍ - g)`.
pub fn platform_wrench(state: &CartesianState, dynamics: &DynParams) -> Vec3 {
    dynamics.m_platform * (state.acc - dynamics.gravity())
}

/// Axes and bar direction of a leg chain, in the leg's local frame.
struct LegAxes {
    z2: Vec3,
    z3: Vec3,
    bar: Vec3,
}

impl LegAxes {
    fn new(trig: &LegTrig) -> Self {
        Self {
            z2: Vec3::new(0.0, -1.0, 0.0),
            z3: Vec3::new(trig.s2, 0.0, -trig.c2),
            bar: trig.bar_direction(),
        }
    }

    fn omega(&self, rates: &Vec3) -> Vec3 {
        rates[1] * self.z2 + rates[2] * self.z3
    }
}

fn bar_inertia(leg: usize, geom: &GeomParams, dynamics: &DynParams, bar: &Vec3) -> Mat3 {
    let perpendicular = dynamics.m_bar[leg] * geom.d4 * geom.d4 / 4.0 + dynamics.rod_inertia[leg];
    perpendicular * (Mat3::identity() - bar * bar.transpose())
}

/// Recursive Newton–Euler generalized forces of one leg chain.
///
/// `rates` and `accels` are `(slider, theta_2, theta_3)`; the result is the
/// matching `(force, torque, torque)` required to produce that motion against
/// gravity with no load at the bar tip.
pub fn leg_dynamics(
    leg: LegIndex,
    trig: &LegTrig,
    rates: &Vec3,
    accels: &Vec3,
    geom: &GeomParams,
    dynamics: &DynParams,
) -> Vec3 {
    let i = leg.index();
    let axes = LegAxes::new(trig);
    let e3 = Vec3::z();

    // Outward pass; gravity enters as an upward base acceleration.
    let base_acc = accels[0] * e3 - leg.to_local(&dynamics.gravity());
    let w2 = rates[1] * axes.z2;
    let dw2 = accels[1] * axes.z2;
    let w3 = w2 + rates[2] * axes.z3;
    let dw3 = dw2 + accels[2] * axes.z3 + w2.cross(&(rates[2] * axes.z3));
    let r = 0.5 * geom.d4 * axes.bar;
    let com_acc = base_acc + dw3.cross(&r) + w3.cross(&w3.cross(&r));

    // Inward pass, moments about the slider point where both revolute axes meet.
    let inertia = bar_inertia(i, geom, dynamics, &axes.bar);
    let f3 = dynamics.m_bar[i] * com_acc;
    let n3 = inertia * dw3 + w3.cross(&(inertia * w3)) + r.cross(&f3);
    let tau3 = n3.dot(&axes.z3);
    let tau2 = n3.dot(&axes.z2);
    let f1 = f3 + dynamics.m_foot[i] * base_acc;
    Vec3::new(f1.dot(&e3), tau2, tau3)
}

/// Per-leg first-order kinematics cached at one `(pose, vel)`.
struct LegModel {
    trig: LegTrig,
    jac: Mat3,
    jac_dot_vel: Vec3,
}

/// Inverse dynamic model prepared at a pose and velocity; linear in `ẍ` afterwards.
struct Prepared<'a> {
    params: &'a MachineParams,
    vel: Vec3,
    legs: [LegModel; 3],
}

impl<'a> Prepared<'a> {
    fn new(vel: Vec3, trigs: [LegTrig; 3], params: &'a MachineParams) -> Result<Self> {
        let build = |leg: LegIndex| -> Result<LegModel> {
            let trig = trigs[leg.index()];
            let jac = leg_jacobian_inv_from_trig(&trig, &params.geom, leg)?;
            let jac_dot = leg_jacobian_inv_dot_from_trig(&trig, &vel, &params.geom, leg)?;
            Ok(LegModel {
                trig,
                jac,
                jac_dot_vel: jac_dot * vel,
            })
        };
        Ok(Self {
            params,
            vel,
            legs: [build(LegIndex::One)?, build(LegIndex::Two)?, build(LegIndex::Three)?],
        })
    }

    /// The bracket `F_P + Σ J_i⁻ᵀ H_i`, a Cartesian force.
    fn cartesian_force(&self, acc: &Vec3) -> Vec3 {
        let dynamics = &self.params.dynamics;
        let mut total = dynamics.m_platform * (acc - dynamics.gravity());
        for leg in LegIndex::ALL {
            let m = &self.legs[leg.index()];
            let rates = m.jac * self.vel;
            let accels = m.jac * acc + m.jac_dot_vel;
            let h = leg_dynamics(leg, &m.trig, &rates, &accels, &self.params.geom, dynamics);
            total += m.jac.transpose() * h;
        }
        total
    }
}

fn trig_from_pose(pose: &Pose, geom: &GeomParams) -> Result<[LegTrig; 3]> {
    Ok([
        leg_trig(pose, geom, LegIndex::One)?,
        leg_trig(pose, geom, LegIndex::Two)?,
        leg_trig(pose, geom, LegIndex::Three)?,
    ])
}

/// Inverse dynamics from the end-effector state (pose-only computational path).
pub fn inverse_dynamics_cartesian(state: &CartesianState, params: &MachineParams) -> Result<Torques> {
    inverse_dynamics_cartesian_counted(state, params, &mut KinematicCounters::default())
}

pub fn inverse_dynamics_cartesian_counted(
    state: &CartesianState,
    params: &MachineParams,
    counters: &mut KinematicCounters,
) -> Result<Torques> {
    let d = d_forward_at(&state.pose, &params.geom)?;
    let trigs = trig_from_pose(&state.pose, &params.geom)?;
    counters.trig_from_pose += 1;
    let model = Prepared::new(state.vel, trigs, params)?;
    Ok(Torques(d.transpose() * model.cartesian_force(&state.acc)))
}

fn d_forward_at(pose: &Pose, geom: &GeomParams) -> Result<Mat3> {
    invert_checked(&d_inv(pose, geom)?)
}

/// Inverse dynamics from joint measurements: forward kinematics first, then
/// explicit passive angles reconstructed from the leg geometry.
pub fn inverse_dynamics_joint(q: &ActiveJoints, qd: &Vec3, qdd: &Vec3, params: &MachineParams) -> Result<Torques> {
    inverse_dynamics_joint_counted(q, qd, qdd, params, &mut KinematicCounters::default())
}

pub fn inverse_dynamics_joint_counted(
    q: &ActiveJoints,
    qd: &Vec3,
    qdd: &Vec3,
    params: &MachineParams,
    counters: &mut KinematicCounters,
) -> Result<Torques> {
    let geom = &params.geom;
    let pose = forward_kinematics(q, geom)?;
    counters.forward_kinematics += 1;
    let m = d_inv(&pose, geom)?;
    let d = invert_checked(&m)?;
    let vel = d * qd;
    let acc = d * (qdd - d_inv_dot(&pose, &vel, geom)? * vel);

    let qv = q.to_vector();
    let mut trigs = [LegTrig::from_angles(0.0, 0.0); 3];
    for leg in LegIndex::ALL {
        let tip = leg_local_position(&pose, geom, leg);
        let slider = qv[leg.index()] + geom.d6 - if leg == LegIndex::One { 0.0 } else { geom.a };
        let bar = (tip - Vec3::new(0.0, 0.0, slider)) / geom.d4;
        let theta3 = (-bar[1]).atan2((bar[0] * bar[0] + bar[2] * bar[2]).sqrt());
        let theta2 = bar[2].atan2(bar[0]);
        trigs[leg.index()] = LegTrig::from_angles(theta2, theta3);
        counters.passive_angle_solves += 1;
    }
    let model = Prepared::new(vel, trigs, params)?;
    Ok(Torques(d.transpose() * model.cartesian_force(&acc)))
}

/// Mass matrix and velocity/gravity bias on the Cartesian side of the model.
struct CartesianModel {
    mass: Mat3,
    bias: Vec3,
    d_inv: Mat3,
    d: Mat3,
}

fn cartesian_model(pose: &Pose, vel: &Vec3, params: &MachineParams) -> Result<CartesianModel> {
    let m = d_inv(pose, &params.geom)?;
    let d = invert_checked(&m)?;
    let trigs = trig_from_pose(pose, &params.geom)?;
    let at_rest = Prepared::new(Vec3::zeros(), trigs, params)?;
    let static_force = at_rest.cartesian_force(&Vec3::zeros());
    let mut mass = Mat3::zeros();
    for k in 0..3 {
        let col = at_rest.cartesian_force(&Vec3::ith(k, 1.0)) - static_force;
        mass.set_column(k, &col);
    }
    let bias = if vel.iter().all(|v| *v == 0.0) {
        static_force
    } else {
        Prepared::new(*vel, trigs, params)?.cartesian_force(&Vec3::zeros())
    };
    Ok(CartesianModel {
        mass,
        bias,
        d_inv: m,
        d,
    })
}

/// Cartesian-side mass matrix `A_c`: `F_P + Σ J_i⁻ᵀ H_i = A_c ẍ + bias`.
pub fn cartesian_mass_matrix(pose: &Pose, params: &MachineParams) -> Result<Mat3> {
    Ok(cartesian_model(pose, &Vec3::zeros(), params)?.mass)
}

/// Actuator-side mass matrix `A = Dᵀ A_c`, column `k` being the torque
/// increment produced by a unit acceleration along axis `k` from rest.
pub fn mass_matrix(pose: &Pose, params: &MachineParams) -> Result<Mat3> {
    let model = cartesian_model(pose, &Vec3::zeros(), params)?;
    Ok(model.d.transpose() * model.mass)
}

/// Plant acceleration under the actuator forces `torques`.
pub fn forward_dynamics(pose: &Pose, vel: &Vec3, torques: &Torques, params: &MachineParams) -> Result<Vec3> {
    let model = cartesian_model(pose, vel, params)?;
    let condition = condition_number(&(model.d.transpose() * model.mass));
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let rhs = model.d_inv.transpose() * torques.0 - model.bias;
    let chol = Cholesky::new(model.mass).ok_or(Error::IllConditioned { condition })?;
    Ok(chol.solve(&rhs))
}

/// World positions of the lumped masses of one leg: (slider point, bar centre).
fn leg_mass_positions(pose: &Pose, geom: &GeomParams, leg: LegIndex, trig: &LegTrig) -> Result<(Vec3, Vec3)> {
    let q = inverse_kinematics(pose, geom)?.to_vector()[leg.index()];
    let slider_local = Vec3::new(0.0, 0.0, q + geom.d6 - if leg == LegIndex::One { 0.0 } else { geom.a });
    let centre_local = slider_local + 0.5 * geom.d4 * trig.bar_direction();
    Ok((
        leg_local_to_world(&slider_local, geom, leg),
        leg_local_to_world(&centre_local, geom, leg),
    ))
}

/// Gravitational potential energy of platform, sliders and bars.
pub fn potential_energy(pose: &Pose, params: &MachineParams) -> Result<f64> {
    let g = params.dynamics.gravity();
    let dynamics = &params.dynamics;
    let mut v = -dynamics.m_platform * g.dot(&pose.to_vector());
    for leg in LegIndex::ALL {
        let trig = leg_trig(pose, &params.geom, leg)?;
        let (slider, centre) = leg_mass_positions(pose, &params.geom, leg, &trig)?;
        let i = leg.index();
        v -= dynamics.m_foot[i] * g.dot(&slider) + dynamics.m_bar[i] * g.dot(&centre);
    }
    Ok(v)
}

/// Kinetic plus potential energy, kinetic part `½ ẋᵀ A_c ẋ`.
pub fn mechanical_energy(pose: &Pose, vel: &Vec3, params: &MachineParams) -> Result<f64> {
    let a_c = cartesian_mass_matrix(pose, params)?;
    Ok(0.5 * vel.dot(&(a_c * vel)) + potential_energy(pose, params)?)
}

/// Kinetic energy summed body by body from the leg chain velocities.
pub fn body_kinetic_energy(pose: &Pose, vel: &Vec3, params: &MachineParams) -> Result<f64> {
    let dynamics = &params.dynamics;
    let mut t = 0.5 * dynamics.m_platform * vel.norm_squared();
    for leg in LegIndex::ALL {
        let i = leg.index();
        let trig = leg_trig(pose, &params.geom, leg)?;
        let rates = leg_jacobian_inv_from_trig(&trig, &params.geom, leg)? * vel;
        let axes = LegAxes::new(&trig);
        let w = axes.omega(&rates);
        let r = 0.5 * params.geom.d4 * axes.bar;
        let v_centre = rates[0] * Vec3::z() + w.cross(&r);
        let inertia = bar_inertia(i, &params.geom, dynamics, &axes.bar);
        t += 0.5 * dynamics.m_foot[i] * rates[0] * rates[0]
            + 0.5 * dynamics.m_bar[i] * v_centre.norm_squared()
            + 0.5 * w.dot(&(inertia * w));
    }
    Ok(t)
}
