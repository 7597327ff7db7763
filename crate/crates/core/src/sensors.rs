//! Measurement chains: quantized joint encoders and a sampled, delayed,
//! noisy pose sensor standing in for the camera.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ActiveJoints, Pose, Vec3};

/// Tolerance used to match sample instants on the sensor clock.
const CLOCK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Quantization step, meters. Zero means an ideal encoder.
    pub resolution: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { resolution: 10e-6 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution >= 0.0) || !self.resolution.is_finite() {
            return Err(Error::Config(format!(
                "encoder resolution must be >= 0 (got {})",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Rounds every joint to the nearest multiple of the resolution.
pub fn encoder_read(q: &ActiveJoints, cfg: &EncoderConfig) -> ActiveJoints {
    if cfg.resolution == 0.0 {
        return *q;
    }
    let quantize = |v: f64| (v / cfg.resolution).round() * cfg.resolution;
    ActiveJoints::new(quantize(q.q1), quantize(q.q2), quantize(q.q3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniform on `[-accuracy, accuracy]` per axis.
    Uniform,
    /// Gaussian with `sigma = accuracy / 3` per axis.
    Gaussian,
}

impl NoiseKind {
    /// Ratio `accuracy / sigma` of the per-axis noise.
    pub fn accuracy_to_sigma(self) -> f64 {
        match self {
            NoiseKind::Uniform => 3f64.sqrt(),
            NoiseKind::Gaussian => 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    /// Noise scale per axis, meters. Zero disables noise.
    pub accuracy: f64,
    /// Sampling rate, Hz.
    pub rate: f64,
    /// Delay between acquisition and availability, seconds.
    pub latency: f64,
    /// Constant offset magnitude, meters.
    pub static_bias: f64,
    /// Direction of the constant offset (normalised on use).
    pub bias_direction: [f64; 3],
    /// Motion-blur error per unit acceleration, m per m/s².
    pub blur_gain: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            accuracy: 10e-6,
            rate: 400.0,
            latency: 1.0 / 400.0,
            static_bias: 0.0,
            bias_direction: [1.0, 0.0, 0.0],
            blur_gain: 0.0,
            noise_kind: NoiseKind::Uniform,
            seed: 0,
        }
    }
}

impl VisionConfig {
    /// Noise-free, delay-free sensor at `rate`.
    pub fn ideal(rate: f64) -> Self {
        Self {
            accuracy: 0.0,
            latency: 0.0,
            rate,
            ..Self::default()
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) {
            return Err(Error::Config(format!("vision rate must be > 0 (got {})", self.rate)));
        }
        if !(self.latency >= 0.0) {
            return Err(Error::Config(format!(
                "vision latency must be >= 0 (got {})",
                self.latency
            )));
        }
        let periods = self.latency * self.rate;
        if (periods - periods.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "vision latency {} s is not a multiple of the sample period",
                self.latency
            )));
        }
        if !(self.accuracy >= 0.0) || !(self.blur_gain >= 0.0) || !self.static_bias.is_finite() {
            return Err(Error::Config("vision accuracy and blur_gain must be >= 0".into()));
        }
        if self.static_bias != 0.0 && Vec3::from(self.bias_direction).norm() == 0.0 {
            return Err(Error::Config("vision bias_direction must be nonzero".into()));
        }
        Ok(())
    }

    /// Sensor error vector at sample index `k` given the true acceleration there.
    fn error(&self, k: u64, acc: &Vec3) -> Vec3 {
        let mut e = Vec3::zeros();
        if self.static_bias != 0.0 {
            e += self.static_bias * Vec3::from(self.bias_direction).normalize();
        }
        e += self.blur_gain * acc;
        if self.accuracy > 0.0 {
            // One independent stream per sample makes the noise a pure function of (seed, k).
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(k);
            match self.noise_kind {
                NoiseKind::Uniform => {
                    for v in e.iter_mut() {
                        *v += rng.random_range(-self.accuracy..=self.accuracy);
                    }
                }
                NoiseKind::Gaussian => {
                    let normal = Normal::new(0.0, self.accuracy / 3.0).expect("finite sigma");
                    for v in e.iter_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
        }
        e
    }
}

/// A sensor output; `valid` is false for held or substituted values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub value: Vec3,
    pub timestamp: f64,
    pub valid: bool,
}

/// True platform state recorded at a sensor sample instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    pub pose: Pose,
    pub acc: Vec3,
}

/// Sample index of the newest acquisition usable at time `t`.
fn usable_index(t: f64, cfg: &VisionConfig) -> Option<u64> {
    let k = ((t - cfg.latency) * cfg.rate + CLOCK_EPS).floor();
    (k >= 0.0).then_some(k as u64)
}

/// Pose measurement available at time `t`: the acquisition at the last sample
/// instant not later than `t - latency`, corrupted by bias, blur and noise,
/// and held until the next sample matures.
pub fn vision_read(history: &[PoseSample], t: f64, cfg: &VisionConfig) -> Result<Measurement> {
    let k = usable_index(t, cfg).ok_or(Error::NotYetAvailable { t })?;
    let ts = k as f64 / cfg.rate;
    let sample = history
        .iter()
        .rev()
        .find(|s| (s.t - ts).abs() <= CLOCK_EPS * ts.max(1.0))
        .ok_or(Error::NotYetAvailable { t })?;
    Ok(Measurement {
        value: sample.pose.to_vector() + cfg.error(k, &sample.acc),
        timestamp: ts,
        valid: true,
    })
}

/// Stateful vision sensor: a bounded history of true samples plus [`vision_read`].
#[derive(Debug, Clone)]
pub struct VisionSensor {
    cfg: VisionConfig,
    history: VecDeque<PoseSample>,
}

impl VisionSensor {
    pub fn new(cfg: VisionConfig) -> Self {
        Self {
            cfg,
            history: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    /// Whether `t` falls on the sensor's sample clock.
    pub fn is_sample_instant(&self, t: f64) -> bool {
        let k = t * self.cfg.rate;
        (k - k.round()).abs() < 1e-6
    }

    /// Stores the true state at a sample instant.
    pub fn record(&mut self, t: f64, pose: Pose, acc: Vec3) {
        let t = (t * self.cfg.rate).round() / self.cfg.rate;
        self.history.push_back(PoseSample { t, pose, acc });
        let keep_after = t - self.cfg.latency - 2.0 * self.cfg.period();
        while self.history.len() > 2 && self.history.front().is_some_and(|s| s.t < keep_after) {
            self.history.pop_front();
        }
    }

    pub fn read(&self, t: f64) -> Result<Measurement> {
        let (a, b) = self.history.as_slices();
        if b.is_empty() {
            vision_read(a, t, &self.cfg)
        } else {
            let all: Vec<PoseSample> = self.history.iter().copied().collect();
            vision_read(&all, t, &self.cfg)
        }
    }
}

/// Backward difference followed by a single-pole low-pass filter,
/// discretised exactly (`alpha = 1 - exp(-2π f_c Δt)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeFilter {
    cutoff: f64,
    previous: Option<(f64, Vec3)>,
    state: Vec3,
}

impl DerivativeFilter {
    /// `cutoff` in Hz; `f64::INFINITY` gives the raw backward difference.
    pub fn new(cutoff: f64) -> Self {
        Self {
            cutoff,
            previous: None,
            state: Vec3::zeros(),
        }
    }

    pub fn reset(&mut self) {
        self.previous = None;
        self.state = Vec3::zeros();
    }

    /// Current estimate without feeding a new sample.
    pub fn estimate(&self) -> Option<Vec3> {
        self.previous.map(|_| self.state)
    }

    pub fn update(&mut self, t: f64, value: &Vec3) -> Result<Vec3> {
        let Some((t_prev, v_prev)) = self.previous.replace((t, *value)) else {
            return Err(Error::InsufficientHistory);
        };
        let dt = t - t_prev;
        if !(dt > 0.0) {
            return Ok(self.state);
        }
        let raw = (value - v_prev) / dt;
        let alpha = 1.0 - (-std::f64::consts::TAU * self.cutoff * dt).exp();
        self.state += alpha * (raw - self.state);
        Ok(self.state)
    }
}

/// Velocity estimate at the end of a measurement stream (invalid entries skipped).
pub fn derivative_estimate(stream: &[Measurement], cutoff: f64) -> Result<Vec3> {
    let mut filter = DerivativeFilter::new(cutoff);
    let mut out = Err(Error::InsufficientHistory);
    for m in stream.iter().filter(|m| m.valid) {
        out = filter.update(m.timestamp, &m.value);
    }
    out
}
