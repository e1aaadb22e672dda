use serde::{Deserialize, Serialize};

use super::MU0;
use crate::rigid::Vec3;

/// A cylindrical NdFeB magnet on the handle, approximated by a cloud of
/// point dipoles placed at the centroids of its eight octants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermanentMagnet {
    pub thickness: f64,
    pub diameter: f64,
    /// Remanence, tesla.
    pub remanence: f64,
    /// Unit magnetization direction, handle frame.
    pub moment_direction: Vec3,
    /// Magnet centre, handle build frame.
    pub attach_point: Vec3,
}

impl Default for PermanentMagnet {
    fn default() -> Self {
        Self {
            thickness: 0.00902,
            diameter: 0.01905,
            remanence: 1.45,
            moment_direction: Vec3::z(),
            attach_point: Vec3::zeros(),
        }
    }
}

/// One sample dipole: offset from the magnet centre (handle frame) and
/// its share of the total moment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointDipole {
    pub offset: Vec3,
    pub moment: Vec3,
}

impl PermanentMagnet {
    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * (0.5 * self.diameter).powi(2) * self.thickness
    }

    /// Total moment magnitude `Br V / μ0`, A·m².
    pub fn moment_magnitude(&self) -> f64 {
        self.remanence * self.volume() / MU0
    }

    pub fn moment(&self) -> Vec3 {
        self.moment_direction.normalize() * self.moment_magnitude()
    }

    /// The 2×2×2 dipole cloud. Offsets are relative to the magnet centre and
    /// expressed in a frame whose z axis is the magnetization direction.
    pub fn dipole_cloud(&self) -> Vec<PointDipole> {
        let axis = self.moment_direction.normalize();
        let rot = nalgebra::Rotation3::rotation_between(&Vec3::z(), &axis).unwrap_or_else(|| {
            nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI)
        });
        // Centroid of a quarter disk sits at 4R/(3π) along both in-plane axes.
        let c = 4.0 * (0.5 * self.diameter) / (3.0 * std::f64::consts::PI);
        let dz = 0.25 * self.thickness;
        let partial = self.moment() / 8.0;
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push(PointDipole {
                        offset: rot * Vec3::new(sx * c, sy * c, sz * dz),
                        moment: partial,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.thickness > 0.0 && self.diameter > 0.0) {
            return Err("magnet.thickness and magnet.diameter must be positive".into());
        }
        if !(self.remanence > 0.0) {
            return Err("magnet.remanence must be positive".into());
        }
        if self.moment_direction.norm() < 1e-12 {
            return Err("magnet.moment_direction must be non-zero".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_sums_to_total_moment() {
        let m = PermanentMagnet::default();
        let sum: Vec3 = m.dipole_cloud().iter().map(|d| d.moment).sum();
        let expected = m.remanence * m.volume() / MU0;
        assert!((sum.norm() - expected).abs() <= 1e-9 * expected);
        assert!((sum.normalize() - Vec3::z()).norm() < 1e-15);
        // Table 1 magnet: V = π (9.525 mm)² · 9.02 mm
        assert!((m.volume() - 2.5710e-6).abs() < 1e-9);
    }

    #[test]
    fn cloud_is_centred_and_inside() {
        let m = PermanentMagnet {
            moment_direction: Vec3::new(1.0, 1.0, 0.0),
            ..Default::default()
        };
        let cloud = m.dipole_cloud();
        assert_eq!(cloud.len(), 8);
        let centroid: Vec3 = cloud.iter().map(|d| d.offset).sum::<Vec3>() / 8.0;
        assert!(centroid.norm() < 1e-15);
        for d in &cloud {
            let axial = d.offset.dot(&m.moment_direction.normalize());
            let radial = (d.offset - axial * m.moment_direction.normalize()).norm();
            assert!(axial.abs() < 0.5 * m.thickness);
            assert!(radial < 0.5 * m.diameter);
        }
    }
}
