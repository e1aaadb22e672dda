//! WebAssembly entry points for the static demo page in `www/`. Everything
//! uses the closed-form field, so no grid has to be built in the browser.

use maglev_core::allocation::{hover_wrench, Allocator};
use maglev_core::control::TwinConfig;
use maglev_core::magnetics::{ActuationModel, CoilArray, Currents, FieldSource};
use maglev_core::plant::{Handle, GRAVITY};
use maglev_core::sensing::{estimate_pose, forward_measure, position_covariance, SensorRig};
use maglev_core::{Pose, Vec3, Wrench};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    config: TwinConfig,
    array: CoilArray,
    handle: Handle,
    rig: SensorRig,
    allocator: Allocator,
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        let config = TwinConfig::default();
        let array =
            CoilArray::from_layout(&config.layout, &config.coil).expect("default layout is valid");
        let handle = config.handle().expect("default handle is valid");
        let rig = config.sensor_rig().expect("default sensors are valid");
        let allocator = Allocator::new(config.allocator.clone());
        Demo {
            config,
            array,
            handle,
            rig,
            allocator,
        }
    }

    fn model(&self, pose: &Pose) -> Option<ActuationModel> {
        ActuationModel::at_pose(&self.array, pose, &self.handle.magnets, FieldSource::Oracle).ok()
    }

    fn hover_currents(&self, handle_z: f64) -> Option<(ActuationModel, Currents)> {
        let model = self.model(&Pose::from_translation(0.0, 0.0, handle_z))?;
        let bias = hover_wrench(&model, self.handle.mass.mass, GRAVITY);
        let c = self
            .allocator
            .allocate_settled(&model, &bias, &Currents::zeros())
            .ok()?;
        Some((model, c.currents))
    }

    /// Coil currents (A) that hold a centred handle at `handle_z`.
    pub fn hover_pattern(&self, handle_z: f64) -> Vec<f64> {
        self.hover_currents(handle_z)
            .map(|(_, c)| c.as_slice().to_vec())
            .unwrap_or_default()
    }

    /// Coil field (T) on an `n`×`n` lattice spanning ±`half_width` at
    /// height `z`, driven with the hover currents for a centred handle at
    /// `handle_z`. Row-major `[bx, by, bz]` per point.
    pub fn field_map(&self, z: f64, half_width: f64, n: usize, handle_z: f64) -> Vec<f64> {
        let Some((model, currents)) = self.hover_currents(handle_z) else {
            return Vec::new();
        };
        let magnetization = model.magnetization(&currents);
        let n = n.max(2);
        let mut out = Vec::with_capacity(3 * n * n);
        for iy in 0..n {
            for ix in 0..n {
                let s = |i: usize| -half_width + 2.0 * half_width * i as f64 / (n - 1) as f64;
                let p = Vec3::new(s(ix), s(iy), z);
                let mut b = Vec3::zeros();
                for (j, coil) in self.array.coils().iter().enumerate() {
                    let axis = coil.axis.normalize();
                    let d = p - coil.base_position;
                    let zl = d.dot(&axis);
                    let radial = d - axis * zl;
                    let r = radial.norm();
                    let er = if r > 1e-12 { radial / r } else { Vec3::zeros() };
                    let (wr, wz) = coil.winding_field_rz(r, zl);
                    let (cr, cz) = coil.core_field_rz(r, zl);
                    b += (er * wr + axis * wz) * currents[j]
                        + (er * cr + axis * cz) * magnetization[j];
                }
                out.extend([b.x, b.y, b.z]);
            }
        }
        out
    }

    /// Centred-column sweep, `n` heights from `z_min` to `z_max`. Per
    /// height: `[z, hover peak current, +z capability, +x capability,
    /// +y capability]`, forces in N beyond hover.
    pub fn capability_curve(&self, z_min: f64, z_max: f64, n: usize) -> Vec<f64> {
        let n = n.max(2);
        let mut out = Vec::with_capacity(5 * n);
        for k in 0..n {
            let z = z_min + (z_max - z_min) * k as f64 / (n - 1) as f64;
            let Some(model) = self.model(&Pose::from_translation(0.0, 0.0, z)) else {
                out.extend([z, f64::NAN, 0.0, 0.0, 0.0]);
                continue;
            };
            let bias = hover_wrench(&model, self.handle.mass.mass, GRAVITY);
            let peak = self
                .allocator
                .allocate_settled(&model, &bias, &Currents::zeros())
                .map_or(f64::NAN, |c| c.max_abs());
            let cap = |d: Vec3| {
                self.allocator
                    .capability(&model, &Wrench::from_force(d), &bias)
            };
            out.extend([z, peak, cap(Vec3::z()), cap(Vec3::x()), cap(Vec3::y())]);
        }
        out
    }

    /// Position errors (m) of `trials` noisy estimates at a centred pose
    /// with image noise `noise_std` (m), as `[dx, dy, dz]` per trial.
    pub fn pose_noise(&self, noise_std: f64, trials: usize, z: f64, seed: u64) -> Vec<f64> {
        let rig = self.rig.clone().with_noise(noise_std.max(0.0));
        let truth = Pose::from_translation(0.0, 0.0, z);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(3 * trials);
        for _ in 0..trials {
            let readings = forward_measure(&truth, &rig, 0.0, &mut rng);
            if let Ok(e) = estimate_pose(&readings, &truth, &rig, &self.config.estimator) {
                let d = e.pose.position - truth.position;
                out.extend([d.x, d.y, d.z]);
            }
        }
        out
    }

    /// Linearized RMS position error (m) for the same setting.
    pub fn predicted_pose_rms(&self, noise_std: f64, z: f64) -> f64 {
        position_covariance(&self.rig, &Pose::from_translation(0.0, 0.0, z), noise_std)
            .map_or(f64::NAN, |c| c.trace().sqrt())
    }
}
