//! Iron-core cylindrical coil: winding field, core magnetization and the
//! combined field used as the slow reference path.
//!
//! Local coil frame: origin at the centre of the core's top face, +z along
//! the coil axis. The winding occupies `r ∈ [ID/2, OD/2]`, `z ∈ [-height, 0]`
//! and the core occupies `r ≤ d/2`, `z ∈ [-core.height, 0]`.

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use super::special::{cel, gauss_legendre};
use super::{MagneticsError, MU0};
use crate::rigid::Vec3;

/// Number of concentric current sheets the winding annulus is split into.
pub const WINDING_LAYERS: usize = 20;

/// Saturating magnetization law of a coil's iron core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreModel {
    pub height: f64,
    pub diameter: f64,
    /// A/m
    pub saturation_magnetization: f64,
    pub apparent_susceptibility: f64,
    pub enabled: bool,
}

impl Default for CoreModel {
    fn default() -> Self {
        Self {
            height: 0.037,
            diameter: 0.008,
            saturation_magnetization: 1.6e6,
            apparent_susceptibility: 25.0,
            enabled: true,
        }
    }
}

impl CoreModel {
    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * (0.5 * self.diameter).powi(2) * self.height
    }

    /// Axial magnetization (A/m) produced by an axial excitation field `h` (A/m).
    #[inline]
    pub fn magnetization(&self, h: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let ms = self.saturation_magnetization;
        ms * (self.apparent_susceptibility * h / ms).tanh()
    }

    /// dM/dH at excitation `h`.
    #[inline]
    pub fn differential_susceptibility(&self, h: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let x = self.apparent_susceptibility * h / self.saturation_magnetization;
        let sech = 1.0 / x.cosh();
        self.apparent_susceptibility * sech * sech
    }

    /// Magnetic co-energy density integral `∫₀^h M(h') dh'` (J/m³ per μ0).
    pub fn coenergy_density(&self, h: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let ms = self.saturation_magnetization;
        let chi = self.apparent_susceptibility;
        ms * ms / chi * ln_cosh(chi * h / ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.height > 0.0) {
            return Err("core.height must be positive".into());
        }
        if !(self.diameter > 0.0) {
            return Err("core.diameter must be positive".into());
        }
        if !(self.saturation_magnetization > 0.0) {
            return Err("core.saturation_magnetization must be positive".into());
        }
        if !(self.apparent_susceptibility > 0.0) {
            return Err("core.apparent_susceptibility must be positive".into());
        }
        Ok(())
    }
}

/// Induced dipole moment (A·m², along the coil axis) of a core under axial
/// excitation `axial_h`.
pub fn core_induced_moment(core: &CoreModel, axial_h: f64) -> f64 {
    core.volume() * core.magnetization(axial_h)
}

fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// One coil of the actuation array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CylindricalCoil {
    /// Centre of the core's top face, base frame.
    pub base_position: Vec3,
    pub axis: Vec3,
    pub height: f64,
    pub outer_diameter: f64,
    pub inner_diameter: f64,
    pub turns: u32,
    pub max_current: f64,
    pub core: CoreModel,
}

impl Default for CylindricalCoil {
    fn default() -> Self {
        Self {
            base_position: Vec3::zeros(),
            axis: Vec3::z(),
            height: 0.027,
            outer_diameter: 0.025,
            inner_diameter: 0.0125,
            turns: 1000,
            max_current: 4.0,
            core: CoreModel::default(),
        }
    }
}

/// Field samples of the two unit sources of a coil in cylindrical components:
/// `[b_r, b_z, ∂b_r/∂r, ∂b_r/∂z, ∂b_z/∂r, ∂b_z/∂z]`.
pub type RzSample = [f64; 6];

impl CylindricalCoil {
    pub fn at(base_position: Vec3) -> Self {
        Self {
            base_position,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.height > 0.0) {
            return Err("coil.height must be positive".into());
        }
        if !(self.inner_diameter >= 0.0 && self.inner_diameter < self.outer_diameter) {
            return Err("coil.inner_diameter must be below coil.outer_diameter".into());
        }
        if self.turns < 1 {
            return Err("coil.turns must be at least 1".into());
        }
        if !(self.max_current > 0.0) {
            return Err("coil.max_current must be positive".into());
        }
        if (self.axis.norm() - 1.0).abs() > 1e-9 {
            return Err("coil.axis must be a unit vector".into());
        }
        if self.core.enabled && self.core.diameter >= self.inner_diameter {
            return Err("core.diameter must fit inside the winding bore".into());
        }
        self.core.validate()
    }

    /// Rotation mapping coil-local vectors to the base frame.
    pub fn frame(&self) -> Rotation3<f64> {
        Rotation3::rotation_between(&Vec3::z(), &self.axis)
            .unwrap_or_else(|| Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI))
    }

    /// Local cylindrical coordinates `(r, z)` of a base-frame point.
    pub fn local_rz(&self, point: &Vec3) -> (f64, f64, Vec3) {
        let local = self.frame().inverse() * (point - self.base_position);
        (local.x.hypot(local.y), local.z, local)
    }

    /// Whether a local `(r, z)` lies inside the winding or core volume.
    pub fn contains_rz(&self, r: f64, z: f64) -> bool {
        let in_winding = r >= 0.5 * self.inner_diameter
            && r <= 0.5 * self.outer_diameter
            && z >= -self.height
            && z <= 0.0;
        let in_core = self.core.enabled
            && r <= 0.5 * self.core.diameter
            && z >= -self.core.height
            && z <= 0.0;
        in_winding || in_core
    }

    /// Surface current density (A/m) of each winding layer per ampere.
    fn layer_sheet_density(&self) -> f64 {
        self.turns as f64 / (self.height * WINDING_LAYERS as f64)
    }

    /// Winding field per ampere at local `(r, z)`: `(b_r, b_z)` in tesla.
    pub fn winding_field_rz(&self, r: f64, z: f64) -> (f64, f64) {
        let (ri, ro) = (0.5 * self.inner_diameter, 0.5 * self.outer_diameter);
        let dr = (ro - ri) / WINDING_LAYERS as f64;
        let k = self.layer_sheet_density();
        let (mut br, mut bz) = (0.0, 0.0);
        for i in 0..WINDING_LAYERS {
            let a = ri + (i as f64 + 0.5) * dr;
            let (r_, z_) = solenoid_sheet_field(a, -self.height, 0.0, k, r, z);
            br += r_;
            bz += z_;
        }
        (br, bz)
    }

    /// Core field per unit magnetization (T per A/m) at local `(r, z)`.
    ///
    /// A uniformly magnetized cylinder is equivalent to a surface current
    /// `K = M` on its lateral face.
    pub fn core_field_rz(&self, r: f64, z: f64) -> (f64, f64) {
        if !self.core.enabled {
            return (0.0, 0.0);
        }
        solenoid_sheet_field(0.5 * self.core.diameter, -self.core.height, 0.0, 1.0, r, z)
    }

    /// Cylindrical field and derivative samples of both unit sources, by
    /// central differences of the closed-form fields with step `h`.
    pub fn rz_samples(&self, r: f64, z: f64, h: f64) -> (RzSample, RzSample) {
        (
            rz_sample(|r, z| self.winding_field_rz(r, z), r, z, h),
            rz_sample(|r, z| self.core_field_rz(r, z), r, z, h),
        )
    }

    /// Volume average of the winding's axial H-field over the core, per ampere.
    /// This is the core's self-excitation gain (A/m per A).
    pub fn self_excitation_per_amp(&self) -> f64 {
        self.excitation_from(|r, z| self.winding_field_rz(r, z).1)
    }

    /// Volume average over this coil's core of an axial flux density (T)
    /// given in the core's local coordinates, divided by μ0.
    pub fn excitation_from(&self, bz: impl Fn(f64, f64) -> f64) -> f64 {
        const PANELS: usize = 12;
        let (xr, wr) = gauss_legendre(8);
        let (xz, wz) = gauss_legendre(8);
        let rc = 0.5 * self.core.diameter;
        let hc = self.core.height;
        let dz = hc / PANELS as f64;
        let mut acc = 0.0;
        for (xi, wi) in xr.iter().zip(&wr) {
            let r = 0.5 * rc * (xi + 1.0);
            // weight 2πr dr / (π rc²)
            let w_r = wi * 0.5 * rc * 2.0 * r / (rc * rc);
            for p in 0..PANELS {
                let z0 = -hc + p as f64 * dz;
                for (xj, wj) in xz.iter().zip(&wz) {
                    let z = z0 + 0.5 * dz * (xj + 1.0);
                    acc += w_r * wj * 0.5 * dz / hc * bz(r, z);
                }
            }
        }
        acc / MU0
    }

    /// Base-frame field of the winding (per ampere) and of the core (per unit
    /// magnetization) at a base-frame point, with their gradients by central
    /// differences of step `h`. Gradient convention `g[(i, j)] = ∂B_i/∂x_j`.
    pub fn unit_fields_fd(
        &self,
        point: &Vec3,
        h: f64,
    ) -> Result<((Vec3, Matrix3<f64>), (Vec3, Matrix3<f64>)), MagneticsError> {
        let frame = self.frame();
        let inv = frame.inverse();
        let eval = |p: &Vec3| -> Result<(Vec3, Vec3), MagneticsError> {
            let local = inv * (p - self.base_position);
            let r = local.x.hypot(local.y);
            if self.contains_rz(r, local.z) {
                return Err(MagneticsError::Domain {
                    point: [p.x, p.y, p.z],
                });
            }
            let (wr, wz) = self.winding_field_rz(r, local.z);
            let (cr, cz) = self.core_field_rz(r, local.z);
            let (ex, ey) = if r > 0.0 {
                (local.x / r, local.y / r)
            } else {
                (0.0, 0.0)
            };
            Ok((
                frame * Vec3::new(wr * ex, wr * ey, wz),
                frame * Vec3::new(cr * ex, cr * ey, cz),
            ))
        };
        let (bw, bc) = eval(point)?;
        let mut gw = Matrix3::zeros();
        let mut gc = Matrix3::zeros();
        for j in 0..3 {
            let mut d = Vec3::zeros();
            d[j] = h;
            let (wp, cp) = eval(&(point + d))?;
            let (wm, cm) = eval(&(point - d))?;
            gw.set_column(j, &((wp - wm) / (2.0 * h)));
            gc.set_column(j, &((cp - cm) / (2.0 * h)));
        }
        Ok(((bw, gw), (bc, gc)))
    }
}

/// Field `(b_r, b_z)` of an ideal finite solenoid sheet of radius `a`
/// spanning `z ∈ [z0, z1]` carrying surface current density `k` (A/m),
/// evaluated at `(r, z)`. Negative `r` is treated as the mirrored point.
pub fn solenoid_sheet_field(a: f64, z0: f64, z1: f64, k: f64, r: f64, z: f64) -> (f64, f64) {
    let sign = if r < 0.0 { -1.0 } else { 1.0 };
    let rho = r.abs();
    let b = 0.5 * (z1 - z0);
    let zc = z - 0.5 * (z0 + z1);
    let b0 = MU0 * k / std::f64::consts::PI;
    let zp = zc + b;
    let zm = zc - b;
    let apr = a + rho;
    let amr = a - rho;
    let gamma = amr / apr;
    let g2 = gamma * gamma;
    let term = |zz: f64| -> (f64, f64) {
        let den = (zz * zz + apr * apr).sqrt();
        let alpha = a / den;
        let beta = zz / den;
        let kc = ((zz * zz + amr * amr) / (zz * zz + apr * apr)).sqrt();
        (
            alpha * cel(kc, 1.0, 1.0, -1.0),
            beta * cel(kc, g2, 1.0, gamma),
        )
    };
    let (rp, zp_) = term(zp);
    let (rm, zm_) = term(zm);
    let br = b0 * (rp - rm);
    let bz = b0 * a / apr * (zp_ - zm_);
    (sign * br, bz)
}

fn rz_sample(f: impl Fn(f64, f64) -> (f64, f64), r: f64, z: f64, h: f64) -> RzSample {
    let (br, bz) = f(r, z);
    let (brp, bzp) = f(r + h, z);
    let (brm, bzm) = f(r - h, z);
    let (brzp, bzzp) = f(r, z + h);
    let (brzm, bzzm) = f(r, z - h);
    let inv = 0.5 / h;
    [
        br,
        bz,
        (brp - brm) * inv,
        (brzp - brzm) * inv,
        (bzp - bzm) * inv,
        (bzzp - bzzm) * inv,
    ]
}

/// Mixed derivative `∂²f/∂r∂z` of both components by a four-point stencil.
pub fn rz_cross(f: impl Fn(f64, f64) -> (f64, f64), r: f64, z: f64, h: f64) -> (f64, f64) {
    let (a1, b1) = f(r + h, z + h);
    let (a2, b2) = f(r + h, z - h);
    let (a3, b3) = f(r - h, z + h);
    let (a4, b4) = f(r - h, z - h);
    let inv = 0.25 / (h * h);
    ((a1 - a2 - a3 + a4) * inv, (b1 - b2 - b3 + b4) * inv)
}

/// Base-frame field of a coil at `point` with `current` flowing and an
/// additional axial excitation `external_axial_h` (A/m) on the core.
///
/// Sums the winding field and the field of the core magnetized by the
/// winding's own excitation plus the external one.
pub fn coil_field_quadrature(
    coil: &CylindricalCoil,
    current: f64,
    point: &Vec3,
    external_axial_h: f64,
) -> Result<Vec3, MagneticsError> {
    let (r, z, local) = coil.local_rz(point);
    if coil.contains_rz(r, z) {
        return Err(MagneticsError::Domain {
            point: [point.x, point.y, point.z],
        });
    }
    let h = coil.self_excitation_per_amp() * current + external_axial_h;
    let m = coil.core.magnetization(h);
    let (wr, wz) = coil.winding_field_rz(r, z);
    let (cr, cz) = coil.core_field_rz(r, z);
    let br = current * wr + m * cr;
    let bz = current * wz + m * cz;
    let (ex, ey) = if r > 0.0 {
        (local.x / r, local.y / r)
    } else {
        (0.0, 0.0)
    };
    Ok(coil.frame() * Vec3::new(br * ex, br * ey, bz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn no_core() -> CylindricalCoil {
        let mut c = CylindricalCoil::default();
        c.core.enabled = false;
        c
    }

    /// Brute-force Biot–Savart over straight segments of a circular loop.
    fn loop_segments_field(radius: f64, z0: f64, current: f64, p: &Vec3, segments: usize) -> Vec3 {
        let mut b = Vec3::zeros();
        let dphi = 2.0 * PI / segments as f64;
        for s in 0..segments {
            let p0 = Vec3::new(
                radius * (s as f64 * dphi).cos(),
                radius * (s as f64 * dphi).sin(),
                z0,
            );
            let p1 = Vec3::new(
                radius * ((s + 1) as f64 * dphi).cos(),
                radius * ((s + 1) as f64 * dphi).sin(),
                z0,
            );
            let dl = p1 - p0;
            let mid = 0.5 * (p0 + p1);
            let rv = p - mid;
            b += MU0 / (4.0 * PI) * current * dl.cross(&rv) / rv.norm().powi(3);
        }
        b
    }

    /// Stacked-loop Biot–Savart field of a thick winding, loops discretized into segments.
    fn brute_force_winding(coil: &CylindricalCoil, current: f64, p: &Vec3) -> Vec3 {
        let (nr, nz, nseg) = (20, 27, 400);
        let (ri, ro) = (0.5 * coil.inner_diameter, 0.5 * coil.outer_diameter);
        let per_loop = current * coil.turns as f64 / (nr * nz) as f64;
        let mut b = Vec3::zeros();
        for i in 0..nr {
            let a = ri + (i as f64 + 0.5) * (ro - ri) / nr as f64;
            for k in 0..nz {
                let z0 = -coil.height + (k as f64 + 0.5) * coil.height / nz as f64;
                b += loop_segments_field(a, z0, per_loop, p, nseg);
            }
        }
        b
    }

    #[test]
    fn zero_current_zero_field() {
        let coil = CylindricalCoil::default();
        for p in [Vec3::new(0.0, 0.0, 0.03), Vec3::new(0.02, -0.01, 0.01)] {
            assert_eq!(
                coil_field_quadrature(&coil, 0.0, &p, 0.0).unwrap(),
                Vec3::zeros()
            );
        }
    }

    #[test]
    fn on_axis_field_matches_segment_biot_savart() {
        let coil = no_core();
        let p = Vec3::new(0.0, 0.0, 0.030);
        let b = coil_field_quadrature(&coil, 1.0, &p, 0.0).unwrap();
        let brute = brute_force_winding(&coil, 1.0, &p);
        assert!((b - brute).norm() < 2e-3 * brute.norm(), "{b} vs {brute}");
        // Single-loop analytic formula at the mean winding radius, all turns lumped
        // at the winding's mid-height: same order of magnitude.
        let a = 0.25 * (coil.inner_diameter + coil.outer_diameter);
        let dz = 0.030 + 0.5 * coil.height;
        let single = MU0 * coil.turns as f64 * a * a / (2.0 * (a * a + dz * dz).powf(1.5));
        assert!(
            b.z > 0.5 * single && b.z < 2.0 * single,
            "{} vs {}",
            b.z,
            single
        );
        // Same loop placed at the winding top gives ~1.8 mT, an upper bound.
        let top = MU0 * coil.turns as f64 * a * a / (2.0 * (a * a + 0.03f64.powi(2)).powf(1.5));
        assert!((top - 1.78e-3).abs() < 0.01e-3);
        assert!(b.z < top && b.z > 0.3 * top, "{} vs {}", b.z, top);
    }

    #[test]
    fn off_axis_field_matches_segment_biot_savart() {
        let coil = no_core();
        for p in [
            Vec3::new(0.011, 0.004, 0.003),
            Vec3::new(0.030, -0.020, 0.015),
            Vec3::new(-0.005, 0.0, -0.030),
            Vec3::new(0.016, 0.0, -0.010),
        ] {
            let b = coil_field_quadrature(&coil, 1.0, &p, 0.0).unwrap();
            let brute = brute_force_winding(&coil, 1.0, &p);
            assert!(
                (b - brute).norm() < 2e-3 * brute.norm(),
                "at {p}: {b} vs {brute}"
            );
        }
    }

    #[test]
    fn core_sheet_matches_loop_stack() {
        // Uniformly magnetized rod == surface current K = M on its side.
        let coil = CylindricalCoil::default();
        let a = 0.5 * coil.core.diameter;
        let p = Vec3::new(0.007, 0.003, 0.004);
        let n = 2000;
        let mut brute = Vec3::zeros();
        for k in 0..n {
            let z0 = -coil.core.height + (k as f64 + 0.5) * coil.core.height / n as f64;
            brute += loop_segments_field(a, z0, coil.core.height / n as f64, &p, 400);
        }
        let r = p.x.hypot(p.y);
        let (br, bz) = coil.core_field_rz(r, p.z);
        let got = Vec3::new(br * p.x / r, br * p.y / r, bz);
        assert!(
            (got - brute).norm() < 1e-3 * brute.norm(),
            "{got} vs {brute}"
        );
    }

    #[test]
    fn on_axis_field_is_axial() {
        let coil = CylindricalCoil::default();
        let b = coil_field_quadrature(&coil, 1.0, &Vec3::new(0.0, 0.0, 0.02), 0.0).unwrap();
        assert_eq!(b.x, 0.0);
        assert_eq!(b.y, 0.0);
    }

    #[test]
    fn points_inside_sources_are_rejected() {
        let coil = CylindricalCoil::default();
        assert!(coil_field_quadrature(&coil, 1.0, &Vec3::new(0.009, 0.0, -0.01), 0.0).is_err());
        assert!(coil_field_quadrature(&coil, 1.0, &Vec3::new(0.0, 0.001, -0.03), 0.0).is_err());
        // bore gap between core and winding is air
        assert!(coil_field_quadrature(&coil, 1.0, &Vec3::new(0.005, 0.0, -0.01), 0.0).is_ok());
    }

    #[test]
    fn linear_without_core_sublinear_with() {
        let p = Vec3::new(0.01, 0.005, 0.02);
        let coil = no_core();
        let b1 = coil_field_quadrature(&coil, 1.5, &p, 0.0).unwrap();
        let b2 = coil_field_quadrature(&coil, 3.0, &p, 0.0).unwrap();
        assert!((b2 - 2.0 * b1).norm() <= 1e-12 * b2.norm());

        let coil = CylindricalCoil::default();
        for i in [0.2, 1.0, 2.0] {
            let b1 = coil_field_quadrature(&coil, i, &p, 0.0).unwrap();
            let b2 = coil_field_quadrature(&coil, 2.0 * i, &p, 0.0).unwrap();
            assert!(b2.norm() <= 2.0 * b1.norm());
        }
    }

    #[test]
    fn induced_moment_limits() {
        let core = CoreModel::default();
        assert_eq!(core_induced_moment(&core, 0.0), 0.0);
        let sat = core.saturation_magnetization * core.volume();
        // M_sat V_core = 1.6e6 · π · 0.004² · 0.037
        assert!((sat - 1.6e6 * PI * 0.004f64.powi(2) * 0.037).abs() < 1e-12);
        assert!((sat - 2.976).abs() < 1e-3);
        for h in [1e6, 1e8, -1e8] {
            let m = core_induced_moment(&core, h);
            assert!(m.abs() <= sat);
        }
        assert!((core_induced_moment(&core, 1e9) - sat).abs() < 1e-9 * sat);
        // small-signal limit: χ_a H / M_sat = 0.04
        let h = 0.04 * core.saturation_magnetization / core.apparent_susceptibility;
        let lin = core.apparent_susceptibility * h * core.volume();
        assert!((core_induced_moment(&core, h) - lin).abs() < 1e-3 * lin);
    }

    #[test]
    fn self_excitation_is_plausible() {
        // Bore field of a short thick winding: below the long-solenoid limit N I / h.
        let coil = CylindricalCoil::default();
        let h = coil.self_excitation_per_amp();
        let long = coil.turns as f64 / coil.height;
        assert!(h > 0.3 * long && h < long, "{h} vs {long}");
    }

    #[test]
    fn coenergy_derivative_is_magnetization() {
        let core = CoreModel::default();
        for h in [-3e4, 1e3, 5e4, 2e5] {
            let d = 1.0;
            let fd = (core.coenergy_density(h + d) - core.coenergy_density(h - d)) / (2.0 * d);
            assert!((fd - core.magnetization(h)).abs() < 1e-6 * core.saturation_magnetization);
        }
    }
}
