//! PSD/LED pose sensing: a pinhole model of three position sensitive diodes,
//! each imaging one LED on the handle, and a damped Gauss–Newton estimator
//! that recovers the 6-DOF pose from the six image coordinates.

use nalgebra::{Matrix3, SMatrix, SVector, Vector6};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rigid::{Pose, Quat, Vec3};

pub const SENSOR_COUNT: usize = 3;
const MEASUREMENTS: usize = 2 * SENSOR_COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensingError {
    #[error("only {valid} of 6 image coordinates valid; pose is unobservable")]
    Unobservable { valid: usize },
    #[error("estimator diverged after {iterations} iterations")]
    Diverged {
        best: PoseEstimate,
        iterations: usize,
    },
    #[error("sensor rig: {0}")]
    Rig(String),
}

/// One PSD with its lens. The optical axis is the sensor frame's +z; image
/// coordinates are along the sensor x and y axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsdSensor {
    /// Optical centre, base frame.
    pub position: Vec3,
    /// Sensor-to-base rotation.
    pub orientation: Quat,
    pub focal_length: f64,
    pub active_half_width: f64,
    /// Image-plane noise standard deviation, m.
    pub noise_std: f64,
    /// Index of the LED this sensor sees.
    pub led: usize,
}

impl PsdSensor {
    /// Sensor at `position` with its optical axis through `target` and its
    /// image x axis horizontal.
    pub fn aimed(position: Vec3, target: Vec3, led: usize) -> Self {
        let axis = (target - position).normalize();
        let mut x = Vec3::z().cross(&axis);
        if x.norm() < 1e-9 {
            x = Vec3::x();
        }
        let x = x.normalize();
        let y = axis.cross(&x);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, axis]));
        Self {
            position,
            orientation: Quat::from_rotation_matrix(&rot),
            focal_length: 0.01,
            active_half_width: 0.0045,
            noise_std: 0.0,
            led,
        }
    }

    fn to_sensor(&self, p: &Vec3) -> Vec3 {
        self.orientation
            .inverse_transform_vector(&(p - self.position))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedMarker {
    /// Handle frame, relative to the pose origin.
    pub position: Vec3,
    /// Emission axis, handle frame.
    pub axis: Vec3,
    pub half_angle: f64,
}

/// Image of one LED, or the reason it is not seen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Image { u: f64, v: f64 },
    Behind,
    OutsideCone,
}

/// Pinhole projection of an LED at `led_world` emitting along `led_axis_world`.
/// An image outside the active area is still returned; validity against the
/// active area is judged per coordinate by the caller.
pub fn project_led(
    sensor: &PsdSensor,
    led_world: &Vec3,
    led_axis_world: &Vec3,
    half_angle: f64,
) -> Projection {
    let p = sensor.to_sensor(led_world);
    if p.z <= 0.0 {
        return Projection::Behind;
    }
    let to_sensor = (sensor.position - led_world).normalize();
    if to_sensor.dot(&led_axis_world.normalize()) < half_angle.cos() {
        return Projection::OutsideCone;
    }
    Projection::Image {
        u: sensor.focal_length * p.x / p.z,
        v: sensor.focal_length * p.y / p.z,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdReading {
    pub u: f64,
    pub v: f64,
    pub u_valid: bool,
    pub v_valid: bool,
}

impl PsdReading {
    pub const INVALID: Self = Self {
        u: 0.0,
        v: 0.0,
        u_valid: false,
        v_valid: false,
    };

    pub fn valid(&self) -> bool {
        self.u_valid && self.v_valid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdReadingSet {
    pub readings: [PsdReading; SENSOR_COUNT],
    pub timestamp: f64,
}

impl PsdReadingSet {
    pub fn valid_count(&self) -> usize {
        self.readings
            .iter()
            .map(|r| r.u_valid as usize + r.v_valid as usize)
            .sum()
    }
}

/// Three sensors and the three LEDs they see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorRig {
    pub sensors: Vec<PsdSensor>,
    pub markers: Vec<LedMarker>,
}

/// Where the default sensors sit: `SENSOR_COUNT` sensors evenly spaced on a
/// horizontal circle, all aimed at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorPlacement {
    pub radius: f64,
    pub height: f64,
    pub aim: Vec3,
    /// Azimuth of the first sensor, degrees; the others follow at 120°.
    pub first_azimuth_deg: f64,
    pub focal_length: f64,
    pub active_half_width: f64,
    pub noise_std: f64,
}

impl Default for SensorPlacement {
    fn default() -> Self {
        Self {
            radius: 0.3,
            height: 0.045,
            aim: Vec3::new(0.0, 0.0, 0.045),
            first_azimuth_deg: 90.0,
            focal_length: 0.08,
            active_half_width: 0.0225,
            noise_std: 1e-6,
        }
    }
}

/// LED layout: evenly spaced on a circle on top of the handle, each emission
/// axis tilted outward from vertical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerPlacement {
    pub radius: f64,
    /// Height above the magnet plane (handle build frame).
    pub height: f64,
    pub first_azimuth_deg: f64,
    pub tilt_deg: f64,
    pub half_angle_deg: f64,
}

impl Default for MarkerPlacement {
    fn default() -> Self {
        Self {
            radius: 0.04,
            height: 0.015,
            first_azimuth_deg: 90.0,
            tilt_deg: 75.0,
            half_angle_deg: 75.0,
        }
    }
}

impl MarkerPlacement {
    /// Markers in the build frame.
    pub fn markers(&self) -> Vec<LedMarker> {
        (0..SENSOR_COUNT)
            .map(|k| {
                let az = (self.first_azimuth_deg + 120.0 * k as f64).to_radians();
                let out = Vec3::new(az.cos(), az.sin(), 0.0);
                let tilt = self.tilt_deg.to_radians();
                LedMarker {
                    position: out * self.radius + Vec3::z() * self.height,
                    axis: Vec3::z() * tilt.cos() + out * tilt.sin(),
                    half_angle: self.half_angle_deg.to_radians(),
                }
            })
            .collect()
    }
}

impl SensorRig {
    pub fn new(sensors: Vec<PsdSensor>, markers: Vec<LedMarker>) -> Result<Self, SensingError> {
        let rig = Self { sensors, markers };
        rig.validate()?;
        Ok(rig)
    }

    /// Sensors from `placement`; sensor `k` sees marker `k`.
    pub fn from_placement(
        placement: &SensorPlacement,
        markers: Vec<LedMarker>,
    ) -> Result<Self, SensingError> {
        let sensors = (0..SENSOR_COUNT)
            .map(|k| {
                let az = (placement.first_azimuth_deg + 120.0 * k as f64).to_radians();
                let pos = Vec3::new(
                    placement.radius * az.cos(),
                    placement.radius * az.sin(),
                    placement.height,
                );
                PsdSensor {
                    focal_length: placement.focal_length,
                    active_half_width: placement.active_half_width,
                    noise_std: placement.noise_std,
                    ..PsdSensor::aimed(pos, placement.aim, k)
                }
            })
            .collect();
        Self::new(sensors, markers)
    }

    pub fn validate(&self) -> Result<(), SensingError> {
        let err = |m: &str| Err(SensingError::Rig(m.into()));
        if self.sensors.len() != SENSOR_COUNT || self.markers.len() != SENSOR_COUNT {
            return err("need exactly three sensors and three markers");
        }
        let mut seen = [false; SENSOR_COUNT];
        for s in &self.sensors {
            if !(s.focal_length > 0.0) || !(s.active_half_width > 0.0) || !(s.noise_std >= 0.0) {
                return err("focal length and active width must be positive, noise non-negative");
            }
            if s.led >= SENSOR_COUNT || seen[s.led] {
                return err("each LED must be assigned to exactly one sensor");
            }
            seen[s.led] = true;
        }
        let m = &self.markers;
        let normal = (m[1].position - m[0].position).cross(&(m[2].position - m[0].position));
        if normal.norm() < 1e-8 {
            return err("markers are collinear");
        }
        if m.iter()
            .any(|k| k.axis.norm() < 1e-12 || !(k.half_angle > 0.0))
        {
            return err("marker axis must be non-zero and half-angle positive");
        }
        Ok(())
    }

    /// Default sensors and markers, with markers re-expressed relative to a
    /// centre of mass at `com` (build frame).
    pub fn default_for_com(com: &Vec3) -> Self {
        Self::from_placement(
            &SensorPlacement::default(),
            MarkerPlacement::default().markers(),
        )
        .expect("default rig is valid")
        .with_marker_offset(&-com)
    }

    /// Same rig with marker positions moved by `offset` (for example to
    /// re-express build-frame markers relative to the centre of mass).
    pub fn with_marker_offset(mut self, offset: &Vec3) -> Self {
        for m in &mut self.markers {
            m.position += offset;
        }
        self
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        for s in &mut self.sensors {
            s.noise_std = noise_std;
        }
        self
    }

    pub fn without_noise(self) -> Self {
        self.with_noise(0.0)
    }

    /// Noise-free readings at `pose`.
    pub fn ideal(&self, pose: &Pose, timestamp: f64) -> PsdReadingSet {
        let mut readings = [PsdReading::INVALID; SENSOR_COUNT];
        for (r, s) in readings.iter_mut().zip(&self.sensors) {
            let m = &self.markers[s.led];
            let world = pose.transform_point(&m.position);
            let axis = pose.transform_vector(&m.axis);
            if let Projection::Image { u, v } = project_led(s, &world, &axis, m.half_angle) {
                *r = PsdReading {
                    u,
                    v,
                    u_valid: u.abs() <= s.active_half_width,
                    v_valid: v.abs() <= s.active_half_width,
                };
            }
        }
        PsdReadingSet {
            readings,
            timestamp,
        }
    }

    /// Predicted image coordinates (no validity checks) and their Jacobian
    /// with respect to a position increment and a base-frame rotation
    /// increment of the pose.
    fn predict(&self, pose: &Pose) -> (Vector6<f64>, SMatrix<f64, MEASUREMENTS, 6>) {
        let mut h = Vector6::zeros();
        let mut jac = SMatrix::<f64, MEASUREMENTS, 6>::zeros();
        let r_h = pose.orientation.to_rotation_matrix();
        for (k, s) in self.sensors.iter().enumerate() {
            let lever = r_h * self.markers[s.led].position;
            let r_s = s.orientation.to_rotation_matrix();
            let p = r_s.inverse() * (pose.position + lever - s.position);
            let f = s.focal_length;
            let z = if p.z.abs() < 1e-12 { 1e-12 } else { p.z };
            h[2 * k] = f * p.x / z;
            h[2 * k + 1] = f * p.y / z;
            // d(u,v)/dp in sensor frame
            let du = Vec3::new(f / z, 0.0, -f * p.x / (z * z));
            let dv = Vec3::new(0.0, f / z, -f * p.y / (z * z));
            let dp_dpos = r_s.inverse().into_inner();
            let dp_drot = -(dp_dpos * lever.cross_matrix());
            for (row, d) in [(2 * k, du), (2 * k + 1, dv)] {
                let a = d.transpose() * dp_dpos;
                let b = d.transpose() * dp_drot;
                for c in 0..3 {
                    jac[(row, c)] = a[c];
                    jac[(row, 3 + c)] = b[c];
                }
            }
        }
        (h, jac)
    }
}

/// Noisy readings at `pose` drawn from `rng`.
pub fn forward_measure<R: Rng>(
    pose: &Pose,
    rig: &SensorRig,
    timestamp: f64,
    rng: &mut R,
) -> PsdReadingSet {
    let mut set = rig.ideal(pose, timestamp);
    for (r, s) in set.readings.iter_mut().zip(&rig.sensors) {
        if s.noise_std > 0.0 {
            let normal = Normal::new(0.0, s.noise_std).expect("finite noise std");
            // draw both coordinates even when invalid, so the stream does not
            // depend on visibility
            let (nu, nv) = (normal.sample(rng), normal.sample(rng));
            if r.u_valid || r.v_valid {
                r.u += nu;
                r.v += nv;
                r.u_valid &= r.u.abs() <= s.active_half_width;
                r.v_valid &= r.v.abs() <= s.active_half_width;
            }
        }
    }
    set
}

/// [`forward_measure`] with a generator seeded from `seed`.
pub fn forward_measure_seeded(
    pose: &Pose,
    rig: &SensorRig,
    timestamp: f64,
    seed: u64,
) -> PsdReadingSet {
    forward_measure(pose, rig, timestamp, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the step norm (m and rad mixed).
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            step_tolerance: 1e-9,
            initial_damping: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Root-mean-square image residual over valid coordinates, m.
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn apply_increment(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dp = Vec3::new(delta[0], delta[1], delta[2]);
    let dr = Vec3::new(delta[3], delta[4], delta[5]);
    let q = Quat::from_scaled_axis(dr) * pose.orientation;
    Pose::new(pose.position + dp, Quat::new_normalize(q.into_inner()))
}

/// Recovers the handle pose from `readings` by Levenberg-damped Gauss–Newton
/// iterations on the reprojection error, starting from `prior`.
pub fn estimate_pose(
    readings: &PsdReadingSet,
    prior: &Pose,
    rig: &SensorRig,
    config: &EstimatorConfig,
) -> Result<PoseEstimate, SensingError> {
    let valid_count = readings.valid_count();
    if valid_count < 5 {
        return Err(SensingError::Unobservable { valid: valid_count });
    }
    let mut mask = Vector6::zeros();
    let mut measured = Vector6::zeros();
    for (k, r) in readings.readings.iter().enumerate() {
        if r.u_valid {
            mask[2 * k] = 1.0;
            measured[2 * k] = r.u;
        }
        if r.v_valid {
            mask[2 * k + 1] = 1.0;
            measured[2 * k + 1] = r.v;
        }
    }
    let evaluate = |pose: &Pose| {
        let (h, jac) = rig.predict(pose);
        let residual = (measured - h).component_mul(&mask);
        (residual, jac)
    };
    let rms = |res: &Vector6<f64>| (res.norm_squared() / valid_count as f64).sqrt();

    let mut pose = *prior;
    let (mut residual, mut jac) = evaluate(&pose);
    let mut cost = residual.norm_squared();
    let mut lambda = config.initial_damping;
    let mut iterations = 0;
    let mut increases = 0;
    let mut converged = false;
    while iterations < config.max_iterations {
        iterations += 1;
        for r in 0..MEASUREMENTS {
            if mask[r] == 0.0 {
                jac.row_mut(r).fill(0.0);
            }
        }
        let jt = jac.transpose();
        let normal = jt * jac + SMatrix::<f64, 6, 6>::identity() * lambda;
        let Some(chol) = normal.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let delta = chol.solve(&(jt * residual));
        let candidate = apply_increment(&pose, &delta);
        let (cand_res, cand_jac) = evaluate(&candidate);
        let cand_cost = cand_res.norm_squared();
        if cand_cost <= cost {
            pose = candidate;
            residual = cand_res;
            jac = cand_jac;
            cost = cand_cost;
            lambda = (lambda / 10.0).max(1e-20);
            increases = 0;
        } else {
            lambda *= 10.0;
            increases += 1;
            if increases >= 3 {
                return Err(SensingError::Diverged {
                    best: PoseEstimate {
                        pose,
                        rms_residual: rms(&residual),
                        iterations,
                        converged: false,
                    },
                    iterations,
                });
            }
        }
        if delta.norm() < config.step_tolerance {
            converged = true;
            break;
        }
    }
    Ok(PoseEstimate {
        pose,
        rms_residual: rms(&residual),
        iterations,
        converged,
    })
}

/// Position covariance of the estimate for isotropic image noise `sigma`,
/// from the linearized measurement model at `pose`.
pub fn position_covariance(rig: &SensorRig, pose: &Pose, sigma: f64) -> Option<Matrix3<f64>> {
    let (_, jac) = rig.predict(pose);
    let info = jac.transpose() * jac;
    let cov = info.try_inverse()? * (sigma * sigma);
    Some(cov.fixed_view::<3, 3>(0, 0).into_owned())
}

/// Central-difference Jacobian of the predicted image coordinates, for
/// checking the analytic one.
pub fn numeric_jacobian(rig: &SensorRig, pose: &Pose, step: f64) -> SMatrix<f64, MEASUREMENTS, 6> {
    let mut jac = SMatrix::<f64, MEASUREMENTS, 6>::zeros();
    for c in 0..6 {
        let mut d = Vector6::zeros();
        d[c] = step;
        let (hp, _) = rig.predict(&apply_increment(pose, &d));
        let (hm, _) = rig.predict(&apply_increment(pose, &(-d)));
        jac.set_column(c, &((hp - hm) / (2.0 * step)));
    }
    jac
}

/// Analytic Jacobian exposed for tests and diagnostics.
pub fn analytic_jacobian(rig: &SensorRig, pose: &Pose) -> SMatrix<f64, MEASUREMENTS, 6> {
    rig.predict(pose).1
}

pub type Measurements = SVector<f64, MEASUREMENTS>;
