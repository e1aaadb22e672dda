//! Monte Carlo check of the pose estimator: accuracy at hover under image
//! noise, and iteration counts while tracking a moving handle.

use maglev_core::control::TwinConfig;
use maglev_core::sensing::{estimate_pose, forward_measure, position_covariance};
use maglev_core::{Pose, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub noise_std: f64,
    pub trials: usize,
    /// RMS of the 3-D position error, m.
    pub rms_position_error: f64,
    /// Linearized prediction of the same quantity, m.
    pub predicted_rms: f64,
    pub rms_rotation_error_deg: f64,
    pub mean_iterations: f64,
    pub failures: usize,
    /// Speed of the tracking run, m/s.
    pub tracking_speed: f64,
    pub tracking_max_iterations: usize,
    pub tracking_mean_iterations: f64,
}

pub fn estimate_bench(
    config: &TwinConfig,
    noise_std: f64,
    trials: usize,
    seed: u64,
) -> Result<BenchReport, HarnessError> {
    if !(noise_std >= 0.0) || trials == 0 {
        return Err(HarnessError::Invalid(
            "estimate-bench: noise >= 0 and trials > 0 required".into(),
        ));
    }
    let rig = config.sensor_rig()?.with_noise(noise_std);
    let truth = Pose::from_translation(0.0, 0.0, 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sq, mut sq_rot, mut iters, mut failures) = (0.0, 0.0, 0usize, 0usize);
    for _ in 0..trials {
        let readings = forward_measure(&truth, &rig, 0.0, &mut rng);
        match estimate_pose(&readings, &truth, &rig, &config.estimator) {
            Ok(e) => {
                sq += (e.pose.position - truth.position).norm_squared();
                sq_rot += e.pose.rotation_error_to(&truth).norm_squared();
                iters += e.iterations;
            }
            Err(_) => failures += 1,
        }
    }
    let ok = (trials - failures).max(1) as f64;
    let predicted =
        position_covariance(&rig, &truth, noise_std).map_or(f64::NAN, |c| c.trace().sqrt());

    // circle of radius 30 mm at the tracking speed, one tick per sample,
    // each estimate seeded with the previous one
    let speed = 0.5;
    let radius = 0.03;
    let dt = config.dt();
    let ticks = (2.0 * std::f64::consts::PI * radius / speed / dt).ceil() as usize;
    let at = |k: usize| {
        let a = speed * dt * k as f64 / radius;
        Pose::from_xyz_rpy(
            radius * a.cos(),
            radius * a.sin(),
            0.02,
            0.0,
            0.0,
            0.3 * a.sin(),
        )
    };
    let mut prior = at(0);
    let (mut track_max, mut track_sum) = (0usize, 0usize);
    for k in 1..=ticks {
        let pose = at(k);
        let readings = forward_measure(&pose, &rig, k as f64 * dt, &mut rng);
        match estimate_pose(&readings, &prior, &rig, &config.estimator) {
            Ok(e) => {
                track_max = track_max.max(e.iterations);
                track_sum += e.iterations;
                prior = e.pose;
            }
            Err(_) => {
                failures += 1;
                track_max = usize::MAX;
            }
        }
    }
    Ok(BenchReport {
        noise_std,
        trials,
        rms_position_error: (sq / ok).sqrt(),
        predicted_rms: predicted,
        rms_rotation_error_deg: (sq_rot / ok).sqrt().to_degrees(),
        mean_iterations: iters as f64 / ok,
        failures,
        tracking_speed: speed,
        tracking_max_iterations: track_max,
        tracking_mean_iterations: track_sum as f64 / ticks as f64,
    })
}

/// Round-trip check without noise: largest position error (m) and
/// rotation error (deg) over a set of poses.
pub fn round_trip(config: &TwinConfig, poses: &[Pose]) -> Result<(f64, f64), HarnessError> {
    let rig = config.sensor_rig()?.without_noise();
    let mut worst = (0.0f64, 0.0f64);
    for p in poses {
        let readings = rig.ideal(p, 0.0);
        let prior = Pose::new(p.position + Vec3::new(2e-4, -1e-4, 1e-4), p.orientation);
        let e = estimate_pose(&readings, &prior, &rig, &config.estimator)
            .map_err(|e| HarnessError::Invalid(format!("round trip at {:?}: {e}", p.to_array())))?;
        worst.0 = worst.0.max((e.pose.position - p.position).norm());
        worst.1 = worst.1.max(e.pose.rotation_error_to(p).norm().to_degrees());
    }
    Ok(worst)
}
