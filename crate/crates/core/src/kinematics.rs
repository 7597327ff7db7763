//! Closed-form kinematic maps of the Orthoglide.
//!
//! Every map here is written as a function of the end-effector position.
//! The three legs share one structure: leg `i` slides along a fixed axis and
//! carries a bar of length `d4` to the platform. Each leg is handled in its own
//! local frame `(p1, p2, along)`:
//!
//! | leg | p1      | p2      | along |
//! |-----|---------|---------|-------|
//! | 1   | x       | y       | z     |
//! | 2   | y       | z - a   | x     |
//! | 3   | z - a   | x       | y     |
//!
//! so the bar vector from the slider point to the platform is
//! `(p1, p2, delta)` with `delta = sqrt(d4² - p1² - p2²)`, and in terms of
//! the passive angles it reads `d4 * (c3 c2, -s3, c3 s2)`.
//!
//! Matrices are `nalgebra::Matrix3` indexed `(row, column)`; rows follow joint
//! order, columns follow Cartesian `x, y, z`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// `|det(d_inv)|` below which the forward instantaneous model is refused.
pub const SINGULARITY_THRESHOLD: f64 = 1e-8;

/// Smallest admissible passive sine/cosine in leg Jacobian denominators.
pub const LEG_SINGULARITY_THRESHOLD: f64 = 1e-6;

/// Local-to-global axis map: local component `j` of leg `i` is global axis `PERM[i][j]`.
const PERM: [[usize; 3]; 3] = [[0, 1, 2], [1, 2, 0], [2, 0, 1]];

/// End-effector position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

impl From<Vec3> for Pose {
    fn from(v: Vec3) -> Self {
        Self::from_vector(&v)
    }
}

/// The three actuated prismatic joint values, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveJoints {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl ActiveJoints {
    pub const fn new(q1: f64, q2: f64, q3: f64) -> Self {
        Self { q1, q2, q3 }
    }

    pub fn to_vector(self) -> Vec3 {
        Vec3::new(self.q1, self.q2, self.q3)
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn within(&self, q_min: f64, q_max: f64) -> bool {
        [self.q1, self.q2, self.q3].iter().all(|q| (q_min..=q_max).contains(q))
    }
}

impl From<Vec3> for ActiveJoints {
    fn from(v: Vec3) -> Self {
        Self::from_vector(&v)
    }
}

/// Geometric parameters: bar length `d4`, slider offset `d6` and axis offset `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeomParams {
    pub d4: f64,
    pub d6: f64,
    pub a: f64,
}

impl Default for GeomParams {
    fn default() -> Self {
        Self {
            d4: 0.31,
            d6: 0.03,
            a: 0.20,
        }
    }
}

impl GeomParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d4 > 0.0) || !self.d6.is_finite() || !self.a.is_finite() {
            return Err(Error::Config(format!(
                "geometry requires d4 > 0 and finite d6, a (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Centre of the nominal workspace, where every bar is parallel to its slider.
    pub fn workspace_center(&self) -> Pose {
        Pose::new(0.0, 0.0, self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LegIndex {
    One,
    Two,
    Three,
}

impl LegIndex {
    pub const ALL: [LegIndex; 3] = [LegIndex::One, LegIndex::Two, LegIndex::Three];

    /// Zero-based index.
    pub fn index(self) -> usize {
        match self {
            LegIndex::One => 0,
            LegIndex::Two => 1,
            LegIndex::Three => 2,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }

    /// Global axis carrying local component `j`.
    pub fn global_axis(self, j: usize) -> usize {
        PERM[self.index()][j]
    }

    /// Vertical offset subtracted from z in this leg's local frame.
    fn z_shift(self, geom: &GeomParams) -> f64 {
        match self {
            LegIndex::One => 0.0,
            _ => geom.a,
        }
    }

    /// Global vector -> local `(p1, p2, along)` components (no offset).
    pub fn to_local(self, v: &Vec3) -> Vec3 {
        let p = PERM[self.index()];
        Vec3::new(v[p[0]], v[p[1]], v[p[2]])
    }

    /// Local components -> global vector (no offset).
    pub fn to_global(self, v: &Vec3) -> Vec3 {
        let p = PERM[self.index()];
        let mut g = Vec3::zeros();
        for j in 0..3 {
            g[p[j]] = v[j];
        }
        g
    }

    /// Local matrix acting on local components -> matrix acting on global Cartesian components.
    ///
    /// Rows are kept (they index joints), columns are permuted.
    pub fn columns_to_global(self, m: &Mat3) -> Mat3 {
        let p = PERM[self.index()];
        let mut g = Mat3::zeros();
        for r in 0..3 {
            for j in 0..3 {
                g[(r, p[j])] = m[(r, j)];
            }
        }
        g
    }

    /// Symmetric bilinear form in local components -> global components.
    pub fn form_to_global(self, m: &Mat3) -> Mat3 {
        let p = PERM[self.index()];
        let mut g = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                g[(p[i], p[j])] = m[(i, j)];
            }
        }
        g
    }
}

impl std::fmt::Display for LegIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Platform position expressed in a leg's local frame (z shifted by `a` for legs 2 and 3).
pub fn leg_local_position(pose: &Pose, geom: &GeomParams, leg: LegIndex) -> Vec3 {
    let shifted = Vec3::new(pose.x, pose.y, pose.z - leg.z_shift(geom));
    leg.to_local(&shifted)
}

/// Local-frame point -> global point, undoing the z shift.
pub fn leg_local_to_world(local: &Vec3, geom: &GeomParams, leg: LegIndex) -> Vec3 {
    let mut g = leg.to_global(local);
    g[2] += leg.z_shift(geom);
    g
}

/// The squared square-root arguments `d4² - p1² - p2²` of the three legs.
pub fn delta_squared(pose: &Pose, geom: &GeomParams) -> [f64; 3] {
    LegIndex::ALL.map(|leg| {
        let l = leg_local_position(pose, geom, leg);
        geom.d4 * geom.d4 - l[0] * l[0] - l[1] * l[1]
    })
}

pub fn reachable(pose: &Pose, geom: &GeomParams) -> bool {
    reachable_with_margin(pose, geom, 0.0)
}

/// Every `delta_i² > margin²` and `z > 0`.
pub fn reachable_with_margin(pose: &Pose, geom: &GeomParams, margin: f64) -> bool {
    pose.z > 0.0
        && pose.x.is_finite()
        && pose.y.is_finite()
        && delta_squared(pose, geom)
            .iter()
            .all(|d2| *d2 > margin * margin && *d2 > 0.0)
}

fn deltas(pose: &Pose, geom: &GeomParams) -> Result<[f64; 3]> {
    let d2 = delta_squared(pose, geom);
    if d2.iter().any(|v| !(*v > 0.0)) {
        return Err(unreachable(pose));
    }
    Ok(d2.map(f64::sqrt))
}

fn unreachable(pose: &Pose) -> Error {
    Error::UnreachablePose {
        x: pose.x,
        y: pose.y,
        z: pose.z,
    }
}

/// Workspace solution of the inverse kinematic problem.
pub fn inverse_kinematics(pose: &Pose, geom: &GeomParams) -> Result<ActiveJoints> {
    let d = deltas(pose, geom)?;
    Ok(ActiveJoints::new(
        pose.z - d[0] - geom.d6,
        pose.x + geom.a - d[1] - geom.d6,
        pose.y + geom.a - d[2] - geom.d6,
    ))
}

/// Closed-form forward kinematics, assembly mode `z > 0`.
///
/// The three bar spheres are centred on the slider points at
/// `P_Bi = q_i + d6 - a` along each axis in the frame shifted down by `a`;
/// their intersection reduces to a quadratic in `t = |P|² - d4²`.
pub fn forward_kinematics(q: &ActiveJoints, geom: &GeomParams) -> Result<Pose> {
    let c = [
        q.q1 + geom.d6 - geom.a,
        q.q2 + geom.d6 - geom.a,
        q.q3 + geom.d6 - geom.a,
    ];
    let tiny = 1e-12 * geom.d4.max(1.0);
    for (i, ci) in c.iter().enumerate() {
        if !(ci.abs() > tiny) {
            return Err(Error::DegenerateBranch { leg: i + 1 });
        }
    }
    let qa = 0.25 * c.iter().map(|ci| 1.0 / (ci * ci)).sum::<f64>();
    let qb = 0.5;
    let qc = 0.25 * c.iter().map(|ci| ci * ci).sum::<f64>() - geom.d4 * geom.d4;
    let disc = qb * qb - 4.0 * qa * qc;
    if !(disc >= 0.0) {
        return Err(Error::NoAssembly { discriminant: disc });
    }
    // Cancellation-free pair of roots.
    let k = -0.5 * (qb + disc.sqrt());
    let roots = [k / qa, qc / k];

    let solve = |t: f64| -> (Pose, bool) {
        let x = c[1] / 2.0 + t / (2.0 * c[1]);
        let y = c[2] / 2.0 + t / (2.0 * c[2]);
        let zs = c[0] / 2.0 + t / (2.0 * c[0]);
        // The workspace branch keeps the platform beyond every slider point.
        let branch = zs - c[0] > 0.0 && x - c[1] > 0.0 && y - c[2] > 0.0;
        (Pose::new(x, y, zs + geom.a), branch)
    };
    let candidates: Vec<(Pose, bool)> = roots
        .iter()
        .filter(|t| t.is_finite())
        .map(|t| solve(*t))
        .filter(|(p, _)| p.z > 0.0)
        .collect();
    candidates
        .iter()
        .find(|(_, branch)| *branch)
        .or_else(|| candidates.iter().max_by(|a, b| a.0.z.total_cmp(&b.0.z)))
        .map(|(p, _)| *p)
        .ok_or(Error::AssemblyModeViolation)
}

/// Inverse instantaneous kinematic matrix: `q̇ = d_inv · ẋ`.
pub fn d_inv(pose: &Pose, geom: &GeomParams) -> Result<Mat3> {
    let d = deltas(pose, geom)?;
    let zs = pose.z - geom.a;
    Ok(Mat3::new(
        pose.x / d[0],
        pose.y / d[0],
        1.0,
        1.0,
        pose.y / d[1],
        zs / d[1],
        pose.x / d[2],
        1.0,
        zs / d[2],
    ))
}

/// Forward instantaneous kinematic matrix `D = d_inv⁻¹`.
pub fn d_forward(pose: &Pose, geom: &GeomParams) -> Result<Mat3> {
    invert_checked(&d_inv(pose, geom)?)
}

/// Inverts `d_inv`, refusing both parallel singularities (`|det d_inv|` below
/// the threshold) and serial ones (`|det D| = 1/|det d_inv|` below it, which
/// happens as some `delta_i -> 0` at the workspace boundary).
pub(crate) fn invert_checked(m: &Mat3) -> Result<Mat3> {
    let det = m.determinant();
    if !(det.abs() >= SINGULARITY_THRESHOLD) || !(1.0 / det.abs() >= SINGULARITY_THRESHOLD) {
        return Err(Error::NearSingular { det });
    }
    m.try_inverse().ok_or(Error::NearSingular { det })
}

/// 2-norm condition number.
pub fn condition_number(m: &Mat3) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Sines and cosines of the two passive revolute angles of one leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegTrig {
    pub s2: f64,
    pub c2: f64,
    pub s3: f64,
    pub c3: f64,
}

impl LegTrig {
    /// Trig values of explicit angles.
    pub fn from_angles(theta2: f64, theta3: f64) -> Self {
        let (s2, c2) = theta2.sin_cos();
        let (s3, c3) = theta3.sin_cos();
        Self { s2, c2, s3, c3 }
    }

    pub fn angles(&self) -> (f64, f64) {
        (self.s2.atan2(self.c2), self.s3.atan2(self.c3))
    }

    /// Unit bar direction `(c3 c2, -s3, c3 s2)` in the leg's local frame.
    pub fn bar_direction(&self) -> Vec3 {
        Vec3::new(self.c3 * self.c2, -self.s3, self.c3 * self.s2)
    }
}

/// Passive-joint trigonometry of all three legs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassiveTrig {
    pub legs: [LegTrig; 3],
}

impl PassiveTrig {
    pub fn leg(&self, leg: LegIndex) -> &LegTrig {
        &self.legs[leg.index()]
    }
}

/// Passive sines and cosines from the end-effector pose alone.
pub fn passive_trig(pose: &Pose, geom: &GeomParams) -> Result<PassiveTrig> {
    deltas(pose, geom)?;
    let mut legs = [LegTrig {
        s2: 0.0,
        c2: 1.0,
        s3: 0.0,
        c3: 1.0,
    }; 3];
    for leg in LegIndex::ALL {
        legs[leg.index()] = leg_trig(pose, geom, leg)?;
    }
    Ok(PassiveTrig { legs })
}

/// Passive trig of a single leg.
pub fn leg_trig(pose: &Pose, geom: &GeomParams, leg: LegIndex) -> Result<LegTrig> {
    let l = leg_local_position(pose, geom, leg);
    let d4 = geom.d4;
    let rho2 = d4 * d4 - l[1] * l[1];
    let delta2 = rho2 - l[0] * l[0];
    if !(delta2 > 0.0) {
        return Err(unreachable(pose));
    }
    let rho = rho2.sqrt();
    Ok(LegTrig {
        s3: -l[1] / d4,
        c3: rho / d4,
        s2: delta2.sqrt() / rho,
        c2: l[0] / rho,
    })
}

fn check_leg(trig: &LegTrig, leg: LegIndex) -> Result<()> {
    for value in [trig.s2, trig.c3] {
        if !(value.abs() >= LEG_SINGULARITY_THRESHOLD) {
            return Err(Error::LegSingularity {
                leg: leg.number(),
                value,
            });
        }
    }
    Ok(())
}

/// Leg inverse instantaneous kinematics in the leg's local frame, from trig values.
///
/// Rows: actuated slider, first passive revolute, second passive revolute.
fn leg_jacobian_local(trig: &LegTrig, d4: f64) -> Mat3 {
    let LegTrig { s2, c2, s3, c3 } = *trig;
    Mat3::new(
        c2 / s2,
        -s3 / (c3 * s2),
        1.0,
        -1.0 / (d4 * c3 * s2),
        s3 * c2 / (d4 * c3 * c3 * s2),
        0.0,
        0.0,
        -1.0 / (d4 * c3),
        0.0,
    )
}

/// Second derivatives of the three leg joint variables with respect to the local position.
fn leg_hessians_local(trig: &LegTrig, d4: f64) -> [Mat3; 3] {
    let LegTrig { s2, c2, s3, c3 } = *trig;
    let p1 = d4 * c3 * c2;
    let p2 = -d4 * s3;
    let delta = d4 * c3 * s2;
    let rho = d4 * c3;
    let (d3, r2) = (delta.powi(3), rho * rho);

    let hq = Mat3::new(
        1.0 / delta + p1 * p1 / d3,
        p1 * p2 / d3,
        0.0,
        p1 * p2 / d3,
        1.0 / delta + p2 * p2 / d3,
        0.0,
        0.0,
        0.0,
        0.0,
    );
    let h22 = -p1 / (delta * r2) - p1 * p2 * p2 * (r2 / delta + 2.0 * delta) / (delta * delta * r2 * r2);
    let h_theta2 = Mat3::new(-p1 / d3, -p2 / d3, 0.0, -p2 / d3, h22, 0.0, 0.0, 0.0, 0.0);
    let mut h_theta3 = Mat3::zeros();
    h_theta3[(1, 1)] = -p2 / rho.powi(3);
    [hq, h_theta2, h_theta3]
}

/// Leg inverse instantaneous kinematic matrix built from trig values.
pub fn leg_jacobian_inv_from_trig(trig: &LegTrig, geom: &GeomParams, leg: LegIndex) -> Result<Mat3> {
    check_leg(trig, leg)?;
    Ok(leg.columns_to_global(&leg_jacobian_local(trig, geom.d4)))
}

/// `d/dt J_i⁻¹` along `ẋ`, built from trig values.
pub fn leg_jacobian_inv_dot_from_trig(trig: &LegTrig, xdot: &Vec3, geom: &GeomParams, leg: LegIndex) -> Result<Mat3> {
    check_leg(trig, leg)?;
    let v = leg.to_local(xdot);
    let hessians = leg_hessians_local(trig, geom.d4);
    let mut local = Mat3::zeros();
    for (r, h) in hessians.iter().enumerate() {
        let row = h * v;
        for j in 0..3 {
            local[(r, j)] = row[j];
        }
    }
    Ok(leg.columns_to_global(&local))
}

/// Leg inverse instantaneous kinematic matrix `J_i⁻¹` at `pose`.
///
/// Its first row coincides with row `i` of [`d_inv`].
pub fn leg_jacobian_inv(pose: &Pose, geom: &GeomParams, leg: LegIndex) -> Result<Mat3> {
    leg_jacobian_inv_from_trig(&leg_trig(pose, geom, leg)?, geom, leg)
}

/// `d/dt J_i⁻¹` along the velocity `xdot`.
pub fn leg_jacobian_inv_dot(pose: &Pose, xdot: &Vec3, geom: &GeomParams, leg: LegIndex) -> Result<Mat3> {
    leg_jacobian_inv_dot_from_trig(&leg_trig(pose, geom, leg)?, xdot, geom, leg)
}

/// Leg joint variables `(q_i, theta_2i, theta_3i)` with the angles recovered by `atan2`.
pub fn leg_joint_variables(pose: &Pose, geom: &GeomParams, leg: LegIndex) -> Result<Vec3> {
    let q = inverse_kinematics(pose, geom)?.to_vector()[leg.index()];
    let (t2, t3) = leg_trig(pose, geom, leg)?.angles();
    Ok(Vec3::new(q, t2, t3))
}

/// Leg joint rates `J_i⁻¹ ẋ`.
pub fn leg_rates(pose: &Pose, xdot: &Vec3, geom: &GeomParams, leg: LegIndex) -> Result<Vec3> {
    Ok(leg_jacobian_inv(pose, geom, leg)? * xdot)
}

/// Leg joint accelerations `J_i⁻¹ ẍ + (d/dt J_i⁻¹) ẋ`.
pub fn leg_accels(pose: &Pose, xdot: &Vec3, xddot: &Vec3, geom: &GeomParams, leg: LegIndex) -> Result<Vec3> {
    let trig = leg_trig(pose, geom, leg)?;
    let j = leg_jacobian_inv_from_trig(&trig, geom, leg)?;
    let jdot = leg_jacobian_inv_dot_from_trig(&trig, xdot, geom, leg)?;
    Ok(j * xddot + jdot * xdot)
}

/// `d/dt d_inv` along `xdot`.
pub fn d_inv_dot(pose: &Pose, xdot: &Vec3, geom: &GeomParams) -> Result<Mat3> {
    deltas(pose, geom)?;
    let mut out = Mat3::zeros();
    for leg in LegIndex::ALL {
        let l = leg_local_position(pose, geom, leg);
        let d = (geom.d4 * geom.d4 - l[0] * l[0] - l[1] * l[1]).sqrt();
        let d3 = d * d * d;
        let h = Mat3::new(
            1.0 / d + l[0] * l[0] / d3,
            l[0] * l[1] / d3,
            0.0,
            l[0] * l[1] / d3,
            1.0 / d + l[1] * l[1] / d3,
            0.0,
            0.0,
            0.0,
            0.0,
        );
        let row = leg.form_to_global(&h) * xdot;
        for j in 0..3 {
            out[(leg.index(), j)] = row[j];
        }
    }
    Ok(out)
}

/// Actuated joint rates and accelerations for a Cartesian motion.
pub fn global_rates_accels(pose: &Pose, xdot: &Vec3, xddot: &Vec3, geom: &GeomParams) -> Result<(Vec3, Vec3)> {
    let m = d_inv(pose, geom)?;
    let mdot = d_inv_dot(pose, xdot, geom)?;
    Ok((m * xdot, m * xddot + mdot * xdot))
}

/// Draws a pose uniformly from the cube of half-width `0.4 d4` around the
/// workspace centre, rejecting samples closer than `margin` to a leg
/// singularity or with a near-singular `d_inv`.
pub fn sample_interior_pose<R: Rng + ?Sized>(rng: &mut R, geom: &GeomParams, margin: f64) -> Pose {
    let c = geom.workspace_center();
    let h = 0.4 * geom.d4;
    loop {
        let p = Pose::new(
            c.x + rng.random_range(-h..h),
            c.y + rng.random_range(-h..h),
            c.z + rng.random_range(-h..h),
        );
        if !reachable_with_margin(&p, geom, margin) {
            continue;
        }
        if let Ok(m) = d_inv(&p, geom) {
            if m.determinant().abs() > 1e-3 {
                return p;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> GeomParams {
        GeomParams::default()
    }

    #[test]
    fn ik_on_vertical_axis() {
        let g = geom();
        let z = 0.25;
        let q = inverse_kinematics(&Pose::new(0.0, 0.0, z), &g).unwrap();
        assert_relative_eq!(q.q1, z - g.d4 - g.d6, epsilon = 1e-15);
    }

    #[test]
    fn ik_second_leg_collapses() {
        let g = geom();
        let x = 0.04;
        let q = inverse_kinematics(&Pose::new(x, 0.0, g.a), &g).unwrap();
        assert_relative_eq!(q.q2, x + g.a - g.d4 - g.d6, epsilon = 1e-15);
    }

    #[test]
    fn ik_rejects_unreachable() {
        let g = geom();
        let err = inverse_kinematics(&Pose::new(0.4, 0.0, g.a), &g).unwrap_err();
        assert!(matches!(err, Error::UnreachablePose { .. }));
    }

    #[test]
    fn fk_roundtrip_symmetric_pose() {
        let g = geom();
        let p = Pose::new(0.0, 0.0, 0.22);
        let back = forward_kinematics(&inverse_kinematics(&p, &g).unwrap(), &g).unwrap();
        assert!(back.distance(&p) < 1e-12);
    }

    #[test]
    fn fk_no_assembly_when_slider_pushed_away() {
        let g = geom();
        let mut q = inverse_kinematics(&g.workspace_center(), &g).unwrap();
        // Pull slider 1 far back: the bar can no longer span the gap.
        q.q1 -= 1.0;
        let c: Vec<f64> = [q.q1, q.q2, q.q3].iter().map(|v| v + g.d6 - g.a).collect();
        let qa = 0.25 * c.iter().map(|v| 1.0 / (v * v)).sum::<f64>();
        let qc = 0.25 * c.iter().map(|v| v * v).sum::<f64>() - g.d4 * g.d4;
        assert!(0.25 - 4.0 * qa * qc < 0.0);
        assert!(matches!(forward_kinematics(&q, &g), Err(Error::NoAssembly { .. })));
    }

    #[test]
    fn fk_degenerate_branch() {
        let g = geom();
        let q = ActiveJoints::new(g.a - g.d6, -0.1, -0.1);
        assert_eq!(forward_kinematics(&q, &g), Err(Error::DegenerateBranch { leg: 1 }));
    }

    #[test]
    fn fk_roundtrip_random() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = sample_interior_pose(&mut rng, &g, 0.05 * g.d4);
            let back = forward_kinematics(&inverse_kinematics(&p, &g).unwrap(), &g).unwrap();
            assert!(back.distance(&p) < 1e-9, "{p:?} -> {back:?}");
        }
    }

    #[test]
    fn d_inv_first_row_on_axis() {
        let g = geom();
        let m = d_inv(&Pose::new(0.0, 0.0, 0.23), &g).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn d_inv_diverges_at_boundary() {
        let g = geom();
        let mut last = 0.0;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            // delta_1² = eps² with y = 0
            let x = (g.d4 * g.d4 - eps * eps).sqrt();
            let p = Pose::new(x, 0.0, g.a);
            let m = d_inv(&p, &g).unwrap();
            assert!(m[(0, 0)] > last);
            last = m[(0, 0)];
        }
        let near = Pose::new((g.d4 * g.d4 - 1e-16).sqrt(), 0.0, g.a);
        assert!(condition_number(&d_inv(&near, &g).unwrap()) > 1e6);
    }

    #[test]
    fn d_forward_is_inverse() {
        let g = geom();
        let p = Pose::new(0.0, 0.0, 0.21);
        let d = d_forward(&p, &g).unwrap();
        let err = (d * d_inv(&p, &g).unwrap() - Mat3::identity()).abs().max();
        assert!(err < 1e-10);
    }

    #[test]
    fn d_forward_near_singular_at_boundary() {
        let g = geom();
        // delta_1² = 1e-12 on the z = a plane.
        let p = Pose::new(0.05, (g.d4 * g.d4 - 0.05 * 0.05 - 1e-12).sqrt(), g.a);
        assert!(d_inv(&p, &g).is_ok());
        assert!(matches!(d_forward(&p, &g), Err(Error::NearSingular { .. })));
    }

    #[test]
    fn passive_trig_axis_cases() {
        let g = geom();
        let t = passive_trig(&Pose::new(0.03, 0.0, 0.22), &g).unwrap();
        assert_eq!(t.legs[0].s3, 0.0);
        assert_eq!(t.legs[0].c3, 1.0);
        let t = passive_trig(&Pose::new(0.0, 0.02, 0.18), &g).unwrap();
        assert_eq!(t.legs[2].s3, 0.0);
        assert_eq!(t.legs[2].c3, 1.0);
    }

    #[test]
    fn bar_direction_reaches_platform() {
        let g = geom();
        let p = Pose::new(0.02, -0.03, 0.17);
        let q = inverse_kinematics(&p, &g).unwrap().to_vector();
        for leg in LegIndex::ALL {
            let trig = leg_trig(&p, &g, leg).unwrap();
            let along = q[leg.index()] + g.d6 - leg.z_shift(&g);
            let base = Vec3::new(0.0, 0.0, along);
            let tip = leg_local_to_world(&(base + g.d4 * trig.bar_direction()), &g, leg);
            assert!((tip - p.to_vector()).norm() < 1e-14);
        }
    }

    #[test]
    fn leg_rows_match_d_inv() {
        let g = geom();
        let p = Pose::new(0.01, 0.05, 0.24);
        let m = d_inv(&p, &g).unwrap();
        for leg in LegIndex::ALL {
            let j = leg_jacobian_inv(&p, &g, leg).unwrap();
            for c in 0..3 {
                assert!((j[(0, c)] - m[(leg.index(), c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn leg_rates_on_axis() {
        let g = geom();
        let p = Pose::new(0.0, 0.0, 0.2);
        let r = leg_rates(&p, &Vec3::z(), &g, LegIndex::One).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(leg_rates(&p, &Vec3::zeros(), &g, LegIndex::Two).unwrap(), Vec3::zeros());
    }

    #[test]
    fn leg_accels_static_velocity() {
        let g = geom();
        let p = Pose::new(0.03, -0.01, 0.19);
        let a = Vec3::new(0.3, -1.0, 2.0);
        for leg in LegIndex::ALL {
            let acc = leg_accels(&p, &Vec3::zeros(), &a, &g, leg).unwrap();
            let direct = leg_jacobian_inv(&p, &g, leg).unwrap() * a;
            assert!((acc - direct).norm() < 1e-14);
            assert_eq!(
                leg_accels(&p, &Vec3::zeros(), &Vec3::zeros(), &g, leg).unwrap(),
                Vec3::zeros()
            );
        }
    }

    #[test]
    fn leg_singularity_reported() {
        let trig = LegTrig {
            s2: 1e-9,
            c2: 1.0,
            s3: 0.0,
            c3: 1.0,
        };
        assert!(matches!(
            leg_jacobian_inv_from_trig(&trig, &geom(), LegIndex::Two),
            Err(Error::LegSingularity { leg: 2, .. })
        ));
    }

    #[test]
    fn global_rates_on_axis() {
        let g = geom();
        let p = Pose::new(0.0, 0.0, 0.2);
        let (qd, qdd) = global_rates_accels(&p, &Vec3::z(), &Vec3::zeros(), &g).unwrap();
        assert_eq!(qd[0], 1.0);
        let (a, b) = global_rates_accels(&p, &Vec3::zeros(), &Vec3::zeros(), &g).unwrap();
        assert_eq!(a, Vec3::zeros());
        assert_eq!(b, Vec3::zeros());
        assert!(qdd.iter().all(|v| v.is_finite()));
    }
}
