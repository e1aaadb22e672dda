//! Coil-array electromagnetics: fields of iron-core coils and the wrench they
//! exert on the handle's permanent magnets.
//!
//! Two field paths exist. The reference path evaluates the closed-form coil
//! fields directly and differentiates them numerically; the fast path samples
//! a precomputed [`FieldGrid`]. Both feed the same [`ActuationModel`].
//!
//! The core of coil `j` is magnetized axially by
//! `H_j = Σ_i C_ji I_i + X_j`, where `C` holds the winding self-excitation
//! gains (diagonal unless neighbour coupling is on) and `X_j` is the volume
//! average of the handle magnets' field over the core. `X_j` is obtained by
//! reciprocity from the core's own unit field at the magnet dipoles, which
//! keeps the magnet–core force the exact gradient of a potential.

pub mod coil;
pub mod grid;
pub mod magnet;
pub mod special;

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coil::{coil_field_quadrature, core_induced_moment, CoreModel, CylindricalCoil};
pub use grid::FieldGrid;
pub use magnet::{PermanentMagnet, PointDipole};

use crate::rigid::{Pose, Vec3, Wrench};

/// Vacuum permeability, H/m.
pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;
/// Coils in the actuation array.
pub const COIL_COUNT: usize = 12;
/// Central-difference step of the reference path, metres.
pub const ORACLE_FD_STEP: f64 = 1e-5;

pub type Currents = SVector<f64, COIL_COUNT>;
pub type Matrix6x12 = SMatrix<f64, 6, COIL_COUNT>;

#[derive(Debug, Error)]
pub enum MagneticsError {
    #[error("point {point:?} lies inside a coil winding or core")]
    Domain { point: [f64; 3] },
    #[error(
        "magnet sample at r = {r:.4} m, z = {z:.4} m is outside the field grid of coil {coil}"
    )]
    Coverage { coil: usize, r: f64, z: f64 },
    #[error("grid resolution {0} m must be in (0, 1 mm]")]
    Resolution(f64),
    #[error("array has {0} coils, expected {COIL_COUNT}")]
    CoilCount(usize),
    #[error("grid cache i/o: {0}")]
    Io(#[source] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldSource {
    /// Closed-form fields with finite-difference gradients.
    Oracle,
    /// Interpolated field grids.
    Grid,
}

/// Default array placement: 3 rows × 4 columns, axes vertical, core tops at z = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayLayout {
    pub rows: usize,
    pub columns: usize,
    /// Centre-to-centre spacing, m.
    pub pitch: f64,
}

impl Default for ArrayLayout {
    fn default() -> Self {
        // coil outer diameter 25 mm + 2 mm separation
        Self {
            rows: 3,
            columns: 4,
            pitch: 0.027,
        }
    }
}

impl ArrayLayout {
    /// Coil positions, row-major from -y to +y, -x to +x.
    pub fn positions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.rows * self.columns);
        for row in 0..self.rows {
            for col in 0..self.columns {
                out.push(Vec3::new(
                    (col as f64 - 0.5 * (self.columns - 1) as f64) * self.pitch,
                    (row as f64 - 0.5 * (self.rows - 1) as f64) * self.pitch,
                    0.0,
                ));
            }
        }
        out
    }
}

/// The twelve coils plus the derived data needed to evaluate wrenches.
#[derive(Clone, Debug)]
pub struct CoilArray {
    coils: Vec<CylindricalCoil>,
    frames: Vec<Rotation3<f64>>,
    /// `C[(j, i)]`: axial excitation of core `j` per ampere in coil `i`.
    excitation_gain: SMatrix<f64, COIL_COUNT, COIL_COUNT>,
    neighbor_coupling: bool,
    grids: Vec<Option<Arc<FieldGrid>>>,
}

impl CoilArray {
    pub fn new(
        coils: Vec<CylindricalCoil>,
        neighbor_coupling: bool,
    ) -> Result<Self, MagneticsError> {
        if coils.len() != COIL_COUNT {
            return Err(MagneticsError::CoilCount(coils.len()));
        }
        let frames: Vec<_> = coils.iter().map(|c| c.frame()).collect();
        let mut gain = SMatrix::<f64, COIL_COUNT, COIL_COUNT>::zeros();
        for j in 0..COIL_COUNT {
            gain[(j, j)] = coils[j].self_excitation_per_amp();
        }
        if neighbor_coupling {
            for j in 0..COIL_COUNT {
                for i in 0..COIL_COUNT {
                    if i != j {
                        gain[(j, i)] = neighbor_excitation(&coils[i], &coils[j]);
                    }
                }
            }
        }
        Ok(Self {
            grids: vec![None; coils.len()],
            coils,
            frames,
            excitation_gain: gain,
            neighbor_coupling,
        })
    }

    /// Table 1 coils on the given layout.
    pub fn from_layout(
        layout: &ArrayLayout,
        template: &CylindricalCoil,
    ) -> Result<Self, MagneticsError> {
        let coils = layout
            .positions()
            .into_iter()
            .map(|p| CylindricalCoil {
                base_position: p,
                ..template.clone()
            })
            .collect();
        Self::new(coils, false)
    }

    pub fn default_array() -> Self {
        Self::from_layout(&ArrayLayout::default(), &CylindricalCoil::default())
            .expect("default layout has twelve coils")
    }

    pub fn coils(&self) -> &[CylindricalCoil] {
        &self.coils
    }

    pub fn neighbor_coupling(&self) -> bool {
        self.neighbor_coupling
    }

    pub fn excitation_gain(&self) -> &SMatrix<f64, COIL_COUNT, COIL_COUNT> {
        &self.excitation_gain
    }

    pub fn max_currents(&self) -> Currents {
        Currents::from_iterator(self.coils.iter().map(|c| c.max_current))
    }

    pub fn has_grids(&self) -> bool {
        self.grids.iter().all(|g| g.is_some())
    }

    /// Builds (or loads from `cache_dir`) one grid per distinct coil geometry.
    pub fn attach_grids(
        &mut self,
        resolution: f64,
        cache_dir: Option<&Path>,
    ) -> Result<(), MagneticsError> {
        let mut built: Vec<Arc<FieldGrid>> = Vec::new();
        for j in 0..self.coils.len() {
            let hash = grid::grid_hash(&self.coils[j], resolution, &grid::GridExtent::default());
            if let Some(g) = built.iter().find(|g| g.params_hash == hash) {
                self.grids[j] = Some(g.clone());
                continue;
            }
            let g = match cache_dir {
                Some(dir) => FieldGrid::load_or_build(
                    &self.coils[j],
                    resolution,
                    &dir.join(format!("coil-{hash:016x}.grid")),
                )?,
                None => FieldGrid::build(&self.coils[j], resolution)?,
            };
            let g = Arc::new(g);
            built.push(g.clone());
            self.grids[j] = Some(g);
        }
        Ok(())
    }

    /// Base-frame unit fields of coil `j` at `point`: winding per ampere and
    /// core per unit magnetization, each with its gradient `∂B_i/∂x_j`.
    pub fn unit_fields(
        &self,
        j: usize,
        point: &Vec3,
        source: FieldSource,
    ) -> Result<UnitFields, MagneticsError> {
        let coil = &self.coils[j];
        match source {
            FieldSource::Oracle => {
                let (w, c) = coil.unit_fields_fd(point, ORACLE_FD_STEP)?;
                Ok(UnitFields {
                    winding: w,
                    core: c,
                })
            }
            FieldSource::Grid => {
                let frame = &self.frames[j];
                let local = frame.inverse() * (point - coil.base_position);
                let r = local.x.hypot(local.y);
                let grid = self.grids[j].as_ref().ok_or(MagneticsError::Coverage {
                    coil: j,
                    r,
                    z: local.z,
                })?;
                let (w, c) = grid.sample(r, local.z).ok_or(MagneticsError::Coverage {
                    coil: j,
                    r,
                    z: local.z,
                })?;
                Ok(UnitFields {
                    winding: rz_to_cartesian(&w, &local, frame),
                    core: rz_to_cartesian(&c, &local, frame),
                })
            }
        }
    }
}

/// Winding and core unit fields with gradients, base frame.
#[derive(Clone, Copy, Debug)]
pub struct UnitFields {
    pub winding: (Vec3, Matrix3<f64>),
    pub core: (Vec3, Matrix3<f64>),
}

/// Maps a cylindrical sample `[b_r, b_z, ∂b_r/∂r, ∂b_r/∂z, ∂b_z/∂r, ∂b_z/∂z]`
/// at coil-local point `local` to a base-frame field and gradient.
pub fn rz_to_cartesian(
    s: &coil::RzSample,
    local: &Vec3,
    frame: &Rotation3<f64>,
) -> (Vec3, Matrix3<f64>) {
    let [br, bz, br_r, br_z, bz_r, bz_z] = *s;
    let r = local.x.hypot(local.y);
    let (ex, ey, br_over_r) = if r > 1e-12 {
        (local.x / r, local.y / r, br / r)
    } else {
        (0.0, 0.0, br_r)
    };
    let b = Vec3::new(br * ex, br * ey, bz);
    let cross = (br_r - br_over_r) * ex * ey;
    let g = Matrix3::new(
        br_r * ex * ex + br_over_r * (1.0 - ex * ex),
        cross,
        br_z * ex,
        cross,
        br_r * ey * ey + br_over_r * (1.0 - ey * ey),
        br_z * ey,
        bz_r * ex,
        bz_r * ey,
        bz_z,
    );
    let rm = frame.matrix();
    (frame * b, rm * g * rm.transpose())
}

/// Excitation of `target`'s core from `source`'s winding at one ampere:
/// volume average of the axial field over the core (coarse quadrature).
fn neighbor_excitation(source: &CylindricalCoil, target: &CylindricalCoil) -> f64 {
    let frame = target.frame();
    let axis = target.axis;
    let src_frame = source.frame();
    let field = |p: &Vec3| -> Vec3 {
        let local = src_frame.inverse() * (p - source.base_position);
        let r = local.x.hypot(local.y);
        let (br, bz) = source.winding_field_rz(r, local.z);
        let (ex, ey) = if r > 0.0 {
            (local.x / r, local.y / r)
        } else {
            (0.0, 0.0)
        };
        src_frame * Vec3::new(br * ex, br * ey, bz)
    };
    let (xr, wr) = special::gauss_legendre(4);
    let (xz, wz) = special::gauss_legendre(16);
    let rc = 0.5 * target.core.diameter;
    let hc = target.core.height;
    const AZIMUTHS: usize = 4;
    let mut acc = 0.0;
    for (xi, wi) in xr.iter().zip(&wr) {
        let r = 0.5 * rc * (xi + 1.0);
        let w_r = wi * 0.5 * rc * 2.0 * r / (rc * rc);
        for (xj, wj) in xz.iter().zip(&wz) {
            let z = -0.5 * hc * (1.0 - xj);
            for a in 0..AZIMUTHS {
                let phi = 2.0 * std::f64::consts::PI * a as f64 / AZIMUTHS as f64;
                let p = target.base_position + frame * Vec3::new(r * phi.cos(), r * phi.sin(), z);
                acc += w_r * 0.5 * wj * field(&p).dot(&axis) / AZIMUTHS as f64;
            }
        }
    }
    acc / MU0
}

/// World-frame dipoles of the handle magnets at `pose`, with their offset
/// from the centre of mass. Attach points are relative to the centre of mass.
pub fn handle_dipoles(pose: &Pose, magnets: &[PermanentMagnet]) -> Vec<(Vec3, Vec3, Vec3)> {
    let mut out = Vec::with_capacity(8 * magnets.len());
    for m in magnets {
        for d in m.dipole_cloud() {
            let lever = pose.orientation * (m.attach_point + d.offset);
            out.push((pose.position + lever, lever, pose.orientation * d.moment));
        }
    }
    out
}

/// Everything needed to evaluate the handle wrench as a function of coil
/// currents at one handle pose.
///
/// The wrench is `W(I) = Ww I + Wc M(I)`, exact for the given pose, where
/// `M_j` is the magnetization of core `j`.
#[derive(Clone, Debug)]
pub struct ActuationModel {
    pub pose: Pose,
    /// Winding wrench per ampere, column per coil.
    pub winding: Matrix6x12,
    /// Core wrench per unit magnetization (per A/m), column per coil.
    pub core: Matrix6x12,
    /// Magnet excitation of each core, A/m.
    pub magnet_excitation: Currents,
    excitation_gain: SMatrix<f64, COIL_COUNT, COIL_COUNT>,
    cores: Vec<CoreModel>,
}

impl ActuationModel {
    pub fn at_pose(
        array: &CoilArray,
        pose: &Pose,
        magnets: &[PermanentMagnet],
        source: FieldSource,
    ) -> Result<Self, MagneticsError> {
        let dipoles = handle_dipoles(pose, magnets);
        let mut winding = Matrix6x12::zeros();
        let mut core = Matrix6x12::zeros();
        let mut x = Currents::zeros();
        for j in 0..COIL_COUNT {
            let vol = array.coils[j].core.volume();
            let (mut fw, mut tw, mut fc, mut tc) =
                (Vec3::zeros(), Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
            let mut xj = 0.0;
            for (p, lever, m) in &dipoles {
                let u = array.unit_fields(j, p, source)?;
                let (bw, gw) = u.winding;
                let (bc, gc) = u.core;
                // F = ∇(m·B)
                let f_w = gw.tr_mul(m);
                let f_c = gc.tr_mul(m);
                fw += f_w;
                tw += m.cross(&bw) + lever.cross(&f_w);
                fc += f_c;
                tc += m.cross(&bc) + lever.cross(&f_c);
                xj += m.dot(&bc);
            }
            winding.set_column(j, &Wrench::new(fw, tw).to_vector());
            core.set_column(j, &Wrench::new(fc, tc).to_vector());
            x[j] = if array.coils[j].core.enabled {
                xj / (MU0 * vol)
            } else {
                0.0
            };
        }
        Ok(Self {
            pose: *pose,
            winding,
            core,
            magnet_excitation: x,
            excitation_gain: array.excitation_gain,
            cores: array.coils.iter().map(|c| c.core.clone()).collect(),
        })
    }

    pub fn excitation(&self, currents: &Currents) -> Currents {
        self.excitation_gain * currents + self.magnet_excitation
    }

    pub fn magnetization(&self, currents: &Currents) -> Currents {
        let h = self.excitation(currents);
        Currents::from_fn(|j, _| self.cores[j].magnetization(h[j]))
    }

    /// Total wrench on the handle, about its centre of mass.
    pub fn wrench(&self, currents: &Currents) -> Wrench {
        Wrench::from_vector(&(self.winding * currents + self.core * self.magnetization(currents)))
    }

    /// Wrench with all coils off: magnet attraction to the passively
    /// magnetized cores.
    pub fn cogging(&self) -> Wrench {
        Wrench::from_vector(&(self.core * self.magnetization(&Currents::zeros())))
    }

    /// Wrench produced by the currents beyond the cogging wrench.
    pub fn coil_wrench(&self, currents: &Currents) -> Wrench {
        let m = self.magnetization(currents) - self.magnetization(&Currents::zeros());
        Wrench::from_vector(&(self.winding * currents + self.core * m))
    }

    /// Linear map from currents to coil wrench with each core replaced by its
    /// secant gain at `operating` currents, so that
    /// `matrix(I) * I == coil_wrench(I)` (diagonal excitation) and the map
    /// reduces to the Jacobian at zero current.
    pub fn matrix(&self, operating: &Currents) -> Matrix6x12 {
        let h0 = self.magnet_excitation;
        let h = self.excitation(operating);
        let slope = Currents::from_fn(|j, _| {
            let core = &self.cores[j];
            let dh = h[j] - h0[j];
            if dh.abs() > 1e-6 * core.saturation_magnetization / core.apparent_susceptibility {
                (core.magnetization(h[j]) - core.magnetization(h0[j])) / dh
            } else {
                core.differential_susceptibility(0.5 * (h[j] + h0[j]))
            }
        });
        let mut a = self.winding;
        for j in 0..COIL_COUNT {
            let scaled = self.core.column(j) * slope[j];
            for i in 0..COIL_COUNT {
                let g = self.excitation_gain[(j, i)];
                if g != 0.0 {
                    let mut col = a.column_mut(i);
                    col += scaled * g;
                }
            }
        }
        a
    }

    /// Jacobian `∂W/∂I` at `operating` currents.
    pub fn jacobian(&self, operating: &Currents) -> Matrix6x12 {
        let h = self.excitation(operating);
        let mut a = self.winding;
        for j in 0..COIL_COUNT {
            let scaled = self.core.column(j) * self.cores[j].differential_susceptibility(h[j]);
            for i in 0..COIL_COUNT {
                let g = self.excitation_gain[(j, i)];
                if g != 0.0 {
                    let mut col = a.column_mut(i);
                    col += scaled * g;
                }
            }
        }
        a
    }
}

/// Wrench on the handle at `pose` with the given coil currents.
pub fn wrench_on_handle(
    pose: &Pose,
    magnets: &[PermanentMagnet],
    array: &CoilArray,
    currents: &Currents,
    source: FieldSource,
) -> Result<Wrench, MagneticsError> {
    Ok(ActuationModel::at_pose(array, pose, magnets, source)?.wrench(currents))
}

/// Wrench from magnet-induced core magnetization alone (all currents zero).
pub fn zero_current_wrench(
    pose: &Pose,
    magnets: &[PermanentMagnet],
    array: &CoilArray,
    source: FieldSource,
) -> Result<Wrench, MagneticsError> {
    Ok(ActuationModel::at_pose(array, pose, magnets, source)?.cogging())
}

/// Magnetic potential energy of the handle at `pose` (reference path), up to
/// a pose-independent constant: `-Σ m·B_winding - Σ μ0 V ∫₀^H M dH`.
/// Its negative gradient is the handle force.
pub fn interaction_energy(
    pose: &Pose,
    magnets: &[PermanentMagnet],
    array: &CoilArray,
    currents: &Currents,
) -> Result<f64, MagneticsError> {
    let dipoles = handle_dipoles(pose, magnets);
    let mut energy = 0.0;
    let mut x = Currents::zeros();
    for (j, coil) in array.coils().iter().enumerate() {
        let frame = &array.frames[j];
        for (p, _, m) in &dipoles {
            let local = frame.inverse() * (p - coil.base_position);
            let r = local.x.hypot(local.y);
            if coil.contains_rz(r, local.z) {
                return Err(MagneticsError::Domain {
                    point: [p.x, p.y, p.z],
                });
            }
            let (ex, ey) = if r > 0.0 {
                (local.x / r, local.y / r)
            } else {
                (0.0, 0.0)
            };
            let (wr, wz) = coil.winding_field_rz(r, local.z);
            let (cr, cz) = coil.core_field_rz(r, local.z);
            let bw = frame * Vec3::new(wr * ex, wr * ey, wz);
            let bc = frame * Vec3::new(cr * ex, cr * ey, cz);
            energy -= currents[j] * m.dot(&bw);
            x[j] += m.dot(&bc);
        }
        if coil.core.enabled {
            x[j] /= MU0 * coil.core.volume();
        } else {
            x[j] = 0.0;
        }
    }
    let h = array.excitation_gain * currents + x;
    for (j, coil) in array.coils().iter().enumerate() {
        energy -= MU0 * coil.core.volume() * coil.core.coenergy_density(h[j]);
    }
    Ok(energy)
}
