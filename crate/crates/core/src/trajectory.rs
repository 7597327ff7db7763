//! Reference paths: quintic point-to-point profiles, the square and circle
//! test paths, and exact analytic setpoint sampling.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{reachable_with_margin, GeomParams, Pose, Vec3};

/// Peak of `|d²s/dτ²|` for the minimum-jerk quintic, `10/√3`.
pub const QUINTIC_PEAK_ACCEL: f64 = 5.773_502_691_896_258;
/// Peak of `ds/dτ`, reached at `τ = 1/2`.
pub const QUINTIC_PEAK_SPEED: f64 = 1.875;

/// Relative workspace margin: every `delta_i` must stay above `0.05 d4` along a path.
pub const WORKSPACE_MARGIN: f64 = 0.05;

/// Relative slack on path time accepted as round-off.
const TIME_EPS: f64 = 1e-12;

/// Normalised quintic `s(τ) = 10τ³ − 15τ⁴ + 6τ⁵` and its first two time derivatives.
pub fn quintic(t: f64, duration: f64) -> Result<(f64, f64, f64)> {
    if !(duration > 0.0) || !(0.0..=duration).contains(&t) {
        return Err(Error::OutOfRange { t, duration });
    }
    let tau = t / duration;
    let (t2, t3) = (tau * tau, tau * tau * tau);
    let s = t3 * (10.0 - 15.0 * tau + 6.0 * t2);
    let ds = 30.0 * t2 * (1.0 - 2.0 * tau + t2) / duration;
    let dds = 60.0 * tau * (1.0 - 3.0 * tau + 2.0 * t2) / (duration * duration);
    Ok((s, ds, dds))
}

/// Desired pose with its first two derivatives at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoint {
    pub t: f64,
    pub pose: Pose,
    pub vel: Vec3,
    pub acc: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathKind {
    /// Square in the XY plane, full stop at each corner.
    Square { side: f64 },
    /// Circle in the XY plane, starting at `center + (radius, 0, 0)`.
    Circle { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    #[serde(flatten)]
    pub kind: PathKind,
    pub center: [f64; 3],
    pub accel_limit: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<f64>,
}

impl PathSpec {
    pub fn square(side: f64, center: Pose, accel_limit: f64) -> Self {
        Self {
            kind: PathKind::Square { side },
            center: [center.x, center.y, center.z],
            accel_limit,
            speed_limit: None,
        }
    }

    pub fn circle(radius: f64, center: Pose, accel_limit: f64) -> Self {
        Self {
            kind: PathKind::Circle { radius },
            center: [center.x, center.y, center.z],
            accel_limit,
            speed_limit: None,
        }
    }

    pub fn with_speed_limit(mut self, v: f64) -> Self {
        self.speed_limit = Some(v);
        self
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    /// Builds the timed path and checks it against the workspace of `geom`.
    pub fn build(&self, geom: &GeomParams) -> Result<Path> {
        match self.kind {
            PathKind::Square { .. } => square_path(self, geom),
            PathKind::Circle { .. } => circle_path(self, geom),
        }
    }

    fn validate_limits(&self, size: f64) -> Result<()> {
        if !(size > 0.0) {
            return Err(Error::Config(format!("path size must be > 0 (got {size})")));
        }
        if !(self.accel_limit > 0.0) {
            return Err(Error::Config(format!(
                "accel_limit must be > 0 (got {})",
                self.accel_limit
            )));
        }
        if let Some(v) = self.speed_limit {
            if !(v > 0.0) {
                return Err(Error::Config(format!("speed_limit must be > 0 (got {v})")));
            }
        }
        Ok(())
    }
}

/// One straight rest-to-rest quintic move.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Segment {
    start: Vec3,
    end: Vec3,
    duration: f64,
}

impl Segment {
    fn sample(&self, t: f64) -> Result<(Vec3, Vec3, Vec3)> {
        let (s, ds, dds) = quintic(t, self.duration)?;
        let d = self.end - self.start;
        Ok((self.start + s * d, ds * d, dds * d))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Segments(Vec<Segment>),
    Circle { center: Vec3, radius: f64 },
}

/// An immutable timed reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    shape: Shape,
    duration: f64,
}

/// Duration of a rest-to-rest quintic of `length` meeting the limits.
fn segment_duration(length: f64, accel_limit: f64, speed_limit: Option<f64>) -> f64 {
    let t_acc = (QUINTIC_PEAK_ACCEL * length / accel_limit).sqrt();
    match speed_limit {
        Some(v) => t_acc.max(QUINTIC_PEAK_SPEED * length / v),
        None => t_acc,
    }
}

impl Path {
    /// Straight rest-to-rest move, no workspace check.
    pub fn point_to_point(start: Pose, end: Pose, accel_limit: f64, speed_limit: Option<f64>) -> Result<Self> {
        let (a, b) = (start.to_vector(), end.to_vector());
        let length = (b - a).norm();
        if !(length > 0.0) || !(accel_limit > 0.0) {
            return Err(Error::Config(
                "point-to-point move needs a length and accel_limit > 0".into(),
            ));
        }
        let duration = segment_duration(length, accel_limit, speed_limit);
        Ok(Self {
            shape: Shape::Segments(vec![Segment {
                start: a,
                end: b,
                duration,
            }]),
            duration,
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn start_pose(&self) -> Pose {
        self.sample_clamped(0.0).pose
    }

    /// Exact analytic setpoint at `t ∈ [0, duration]`.
    pub fn sample(&self, t: f64) -> Result<Setpoint> {
        let tol = TIME_EPS * self.duration;
        if !(-tol..=self.duration + tol).contains(&t) {
            return Err(Error::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        let tq = t.clamp(0.0, self.duration);
        let (p, v, a) = match &self.shape {
            Shape::Segments(segments) => {
                let mut local = tq;
                let mut out = None;
                for (k, seg) in segments.iter().enumerate() {
                    if local <= seg.duration + tol || k + 1 == segments.len() {
                        // snap to segment ends so corners are exactly at rest
                        let lt = if local < tol { 0.0 } else { local.min(seg.duration) };
                        let lt = if seg.duration - lt < tol { seg.duration } else { lt };
                        out = Some(seg.sample(lt)?);
                        break;
                    }
                    local -= seg.duration;
                }
                out.expect("path has at least one segment")
            }
            &Shape::Circle { center, radius } => {
                let (s, ds, dds) = quintic(tq, self.duration)?;
                let (theta, w, dw) = (TAU * s, TAU * ds, TAU * dds);
                let (sin, cos) = theta.sin_cos();
                let radial = Vec3::new(cos, sin, 0.0);
                let tangent = Vec3::new(-sin, cos, 0.0);
                (
                    center + radius * radial,
                    radius * w * tangent,
                    radius * dw * tangent - radius * w * w * radial,
                )
            }
        };
        Ok(Setpoint {
            t,
            pose: Pose::from_vector(&p),
            vel: v,
            acc: a,
        })
    }

    /// Like [`Path::sample`], holding the end pose at rest after the path ends
    /// and the start pose before it begins.
    pub fn sample_clamped(&self, t: f64) -> Setpoint {
        let tc = t.clamp(0.0, self.duration);
        let mut sp = self.sample(tc).expect("clamped time is in range");
        sp.t = t;
        if t != tc {
            sp.vel = Vec3::zeros();
            sp.acc = Vec3::zeros();
        }
        sp
    }

    fn check_workspace(&self, geom: &GeomParams, samples: usize) -> Result<()> {
        let margin = WORKSPACE_MARGIN * geom.d4;
        for k in 0..=samples {
            let t = self.duration * k as f64 / samples as f64;
            let p = self.sample(t)?.pose;
            if !reachable_with_margin(&p, geom, margin) {
                return Err(Error::WorkspaceViolation { x: p.x, y: p.y, z: p.z });
            }
        }
        Ok(())
    }
}

/// Four independent quintic edges starting at the `(-side/2, -side/2)` corner,
/// counter-clockwise, each timed so its peak acceleration hits the limit.
pub fn square_path(spec: &PathSpec, geom: &GeomParams) -> Result<Path> {
    let PathKind::Square { side } = spec.kind else {
        return Err(Error::Config("square_path needs a square spec".into()));
    };
    spec.validate_limits(side)?;
    let c = spec.center();
    let h = side / 2.0;
    let corners = [
        c + Vec3::new(-h, -h, 0.0),
        c + Vec3::new(h, -h, 0.0),
        c + Vec3::new(h, h, 0.0),
        c + Vec3::new(-h, h, 0.0),
    ];
    let duration = segment_duration(side, spec.accel_limit, spec.speed_limit);
    let segments: Vec<Segment> = (0..4)
        .map(|k| Segment {
            start: corners[k],
            end: corners[(k + 1) % 4],
            duration,
        })
        .collect();
    let path = Path {
        shape: Shape::Segments(segments),
        duration: 4.0 * duration,
    };
    path.check_workspace(geom, 400)?;
    Ok(path)
}

/// Peak over `τ` of the dimensionless circle acceleration
/// `sqrt(s''² + (2π)² s'⁴)`, found on a dense grid then refined by golden section.
fn circle_accel_factor() -> f64 {
    let f = |tau: f64| {
        let ds = 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau);
        let dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau);
        (dds * dds + TAU * TAU * ds.powi(4)).sqrt()
    };
    let n = 2000;
    let (mut best, mut best_k) = (f64::MIN, 0);
    for k in 0..=n {
        let v = f(k as f64 / n as f64);
        if v > best {
            best = v;
            best_k = k;
        }
    }
    let h = 1.0 / n as f64;
    let (mut lo, mut hi) = (((best_k as f64) - 1.0) * h, ((best_k as f64) + 1.0) * h);
    lo = lo.max(0.0);
    hi = hi.min(1.0);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    best.max(f(0.5 * (lo + hi)))
}

/// Circle whose angle follows a quintic from 0 to 2π, timed as fast as the
/// combined tangential and centripetal acceleration bound (and the optional
/// speed bound) allow.
pub fn circle_path(spec: &PathSpec, geom: &GeomParams) -> Result<Path> {
    let PathKind::Circle { radius } = spec.kind else {
        return Err(Error::Config("circle_path needs a circle spec".into()));
    };
    spec.validate_limits(radius)?;
    // Acceleration scales exactly as 1/T², speed as 1/T.
    let t_acc = (TAU * radius * circle_accel_factor() / spec.accel_limit).sqrt();
    let duration = match spec.speed_limit {
        Some(v) => t_acc.max(2.0 * PI * radius * QUINTIC_PEAK_SPEED / v),
        None => t_acc,
    };
    let path = Path {
        shape: Shape::Circle {
            center: spec.center(),
            radius,
        },
        duration,
    };
    path.check_workspace(geom, 720)?;
    Ok(path)
}
