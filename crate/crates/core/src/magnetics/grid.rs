//! Precomputed `(r, z)` lattice of a coil's unit fields.
//!
//! Each node stores, for the winding (per ampere) and the core (per unit
//! magnetization), `B_r` and `B_z` together with their `r`, `z` and mixed
//! derivatives. Samples use bicubic Hermite interpolation, so the returned
//! gradient is the exact derivative of the interpolated field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::coil::{rz_cross, CylindricalCoil, RzSample, WINDING_LAYERS};
use super::MagneticsError;

const MAGIC: &[u8; 8] = b"MLVGRID1";
/// Values stored per node: 2 sources × 2 components × (f, f_r, f_z, f_rz).
pub const NODE_STRIDE: usize = 16;
/// Derivative step for node samples, metres.
const FD_STEP: f64 = 1e-5;

/// Lattice extent in coil-local coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridExtent {
    pub r_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridExtent {
    fn default() -> Self {
        Self {
            r_max: 0.16,
            z_min: 0.002,
            z_max: 0.082,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub params_hash: u64,
    pub nr: usize,
    pub nz: usize,
    pub r0: f64,
    pub dr: f64,
    pub z0: f64,
    pub dz: f64,
    /// Row-major (`z` outer, `r` inner), [`NODE_STRIDE`] values per node.
    data: Vec<f64>,
}

/// Hash of everything that determines a grid's contents.
pub fn grid_hash(coil: &CylindricalCoil, resolution: f64, extent: &GridExtent) -> u64 {
    let mut h = Sha256::new();
    h.update(MAGIC);
    for v in [
        coil.height,
        coil.outer_diameter,
        coil.inner_diameter,
        coil.turns as f64,
        coil.core.height,
        coil.core.diameter,
        if coil.core.enabled { 1.0 } else { 0.0 },
        WINDING_LAYERS as f64,
        resolution,
        extent.r_max,
        extent.z_min,
        extent.z_max,
        FD_STEP,
    ] {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl FieldGrid {
    /// Tabulates `coil`'s unit fields on a lattice of spacing `resolution`.
    pub fn build(coil: &CylindricalCoil, resolution: f64) -> Result<Self, MagneticsError> {
        Self::build_with_extent(coil, resolution, &GridExtent::default())
    }

    pub fn build_with_extent(
        coil: &CylindricalCoil,
        resolution: f64,
        extent: &GridExtent,
    ) -> Result<Self, MagneticsError> {
        if !(resolution > 0.0 && resolution <= 1e-3) {
            return Err(MagneticsError::Resolution(resolution));
        }
        let nr = (extent.r_max / resolution).ceil() as usize + 1;
        let nz = ((extent.z_max - extent.z_min) / resolution).ceil() as usize + 1;
        let mut data = vec![0.0; nr * nz * NODE_STRIDE];

        let threads = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(nz);
        let rows_per = nz.div_ceil(threads);
        std::thread::scope(|s| {
            for (chunk_idx, chunk) in data.chunks_mut(rows_per * nr * NODE_STRIDE).enumerate() {
                s.spawn(move || {
                    for (k, node) in chunk.chunks_mut(NODE_STRIDE).enumerate() {
                        let iz = chunk_idx * rows_per + k / nr;
                        let ir = k % nr;
                        let r = ir as f64 * resolution;
                        let z = extent.z_min + iz as f64 * resolution;
                        fill_node(coil, r, z, node);
                    }
                });
            }
        });

        Ok(Self {
            params_hash: grid_hash(coil, resolution, extent),
            nr,
            nz,
            r0: 0.0,
            dr: resolution,
            z0: extent.z_min,
            dz: resolution,
            data,
        })
    }

    pub fn r_max(&self) -> f64 {
        self.r0 + (self.nr - 1) as f64 * self.dr
    }

    pub fn z_max(&self) -> f64 {
        self.z0 + (self.nz - 1) as f64 * self.dz
    }

    pub fn covers(&self, r: f64, z: f64) -> bool {
        r >= self.r0 && r <= self.r_max() && z >= self.z0 && z <= self.z_max()
    }

    fn node(&self, ir: usize, iz: usize) -> &[f64] {
        let i = (iz * self.nr + ir) * NODE_STRIDE;
        &self.data[i..i + NODE_STRIDE]
    }

    /// Interpolated `(winding, core)` samples at local `(r, z)`; `None` when
    /// the point is outside the lattice.
    pub fn sample(&self, r: f64, z: f64) -> Option<(RzSample, RzSample)> {
        if !self.covers(r, z) {
            return None;
        }
        let fr = snap((r - self.r0) / self.dr);
        let fz = snap((z - self.z0) / self.dz);
        let ir = (fr.floor() as usize).min(self.nr - 2);
        let iz = (fz.floor() as usize).min(self.nz - 2);
        let u = fr - ir as f64;
        let v = fz - iz as f64;

        let (hu, du) = hermite_basis(u);
        let (hv, dv) = hermite_basis(v);
        let corners = [
            (self.node(ir, iz), 0, 0),
            (self.node(ir + 1, iz), 1, 0),
            (self.node(ir, iz + 1), 0, 1),
            (self.node(ir + 1, iz + 1), 1, 1),
        ];
        // Per stored component: value, ∂/∂r, ∂/∂z.
        let mut acc = [[0.0f64; 3]; 4];
        for (node, a, b) in corners {
            for (c, out) in acc.iter_mut().enumerate() {
                let f = &node[4 * c..4 * c + 4];
                let (f0, f_r, f_z, f_rz) = (
                    f[0],
                    f[1] * self.dr,
                    f[2] * self.dz,
                    f[3] * self.dr * self.dz,
                );
                // basis values and u/v derivatives for this corner
                let (h_a, dh_a, g_a, dg_a) = (hu[a], hu[a + 2], du[a], du[a + 2]);
                let (h_b, dh_b, g_b, dg_b) = (hv[b], hv[b + 2], dv[b], dv[b + 2]);
                out[0] += f0 * h_a * h_b + f_r * dh_a * h_b + f_z * h_a * dh_b + f_rz * dh_a * dh_b;
                out[1] += f0 * g_a * h_b + f_r * dg_a * h_b + f_z * g_a * dh_b + f_rz * dg_a * dh_b;
                out[2] += f0 * h_a * g_b + f_r * dh_a * g_b + f_z * h_a * dg_b + f_rz * dh_a * dg_b;
            }
        }
        let to_sample = |br: [f64; 3], bz: [f64; 3]| -> RzSample {
            [
                br[0],
                bz[0],
                br[1] / self.dr,
                br[2] / self.dz,
                bz[1] / self.dr,
                bz[2] / self.dz,
            ]
        };
        Some((to_sample(acc[0], acc[1]), to_sample(acc[2], acc[3])))
    }

    /// Raw node values, for tests and diagnostics.
    pub fn node_values(&self, ir: usize, iz: usize) -> [f64; NODE_STRIDE] {
        self.node(ir, iz).try_into().expect("stride")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&self.params_hash.to_le_bytes())?;
        w.write_all(&(self.nr as u64).to_le_bytes())?;
        w.write_all(&(self.nz as u64).to_le_bytes())?;
        for v in [self.r0, self.dr, self.z0, self.dz] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    /// Reads a cached grid. Returns `Ok(None)` when the file is missing, was
    /// written for different parameters, or is truncated.
    pub fn load(path: &Path, expected_hash: u64) -> std::io::Result<Option<Self>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
            return Ok(None);
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> std::io::Result<[u8; 8]> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let hash = u64::from_le_bytes(next(&mut r)?);
        if hash != expected_hash {
            return Ok(None);
        }
        let nr = u64::from_le_bytes(next(&mut r)?) as usize;
        let nz = u64::from_le_bytes(next(&mut r)?) as usize;
        let r0 = f64::from_le_bytes(next(&mut r)?);
        let dr = f64::from_le_bytes(next(&mut r)?);
        let z0 = f64::from_le_bytes(next(&mut r)?);
        let dz = f64::from_le_bytes(next(&mut r)?);
        let n = nr * nz * NODE_STRIDE;
        let mut bytes = vec![0u8; n * 8];
        if r.read_exact(&mut bytes).is_err() {
            return Ok(None);
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Some(Self {
            params_hash: hash,
            nr,
            nz,
            r0,
            dr,
            z0,
            dz,
            data,
        }))
    }

    /// Loads the grid from `path` if it matches `coil`/`resolution`, otherwise
    /// builds it and writes the cache.
    pub fn load_or_build(
        coil: &CylindricalCoil,
        resolution: f64,
        path: &Path,
    ) -> Result<Self, MagneticsError> {
        let hash = grid_hash(coil, resolution, &GridExtent::default());
        if let Some(grid) = Self::load(path, hash).map_err(MagneticsError::Io)? {
            return Ok(grid);
        }
        let grid = Self::build(coil, resolution)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(MagneticsError::Io)?;
        }
        grid.save(path).map_err(MagneticsError::Io)?;
        Ok(grid)
    }
}

fn fill_node(coil: &CylindricalCoil, r: f64, z: f64, node: &mut [f64]) {
    let (w, c) = coil.rz_samples(r, z, FD_STEP);
    let (w_rz_r, w_rz_z) = rz_cross(|r, z| coil.winding_field_rz(r, z), r, z, FD_STEP);
    let (c_rz_r, c_rz_z) = rz_cross(|r, z| coil.core_field_rz(r, z), r, z, FD_STEP);
    // [f, f_r, f_z, f_rz] for winding B_r, winding B_z, core B_r, core B_z
    node.copy_from_slice(&[
        w[0], w[2], w[3], w_rz_r, //
        w[1], w[4], w[5], w_rz_z, //
        c[0], c[2], c[3], c_rz_r, //
        c[1], c[4], c[5], c_rz_z,
    ]);
}

/// Rounds lattice coordinates that are within rounding noise of a node.
#[inline]
fn snap(f: f64) -> f64 {
    let n = f.round();
    if (f - n).abs() < 1e-9 {
        n
    } else {
        f
    }
}

/// Cubic Hermite basis on [0, 1]: returns `([h00, h01, h10, h11], derivatives)`
/// with indices 0/1 the value functions for the left/right node and 2/3 the
/// slope functions.
#[inline]
fn hermite_basis(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        [
            2.0 * t3 - 3.0 * t2 + 1.0,
            -2.0 * t3 + 3.0 * t2,
            t3 - 2.0 * t2 + t,
            t3 - t2,
        ],
        [
            6.0 * t2 - 6.0 * t,
            -6.0 * t2 + 6.0 * t,
            3.0 * t2 - 4.0 * t + 1.0,
            3.0 * t2 - 2.0 * t,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_extent() -> GridExtent {
        GridExtent {
            r_max: 0.04,
            z_min: 0.002,
            z_max: 0.03,
        }
    }

    #[test]
    fn rejects_coarse_resolution() {
        let coil = CylindricalCoil::default();
        assert!(matches!(
            FieldGrid::build(&coil, 2e-3),
            Err(MagneticsError::Resolution(_))
        ));
    }

    #[test]
    fn node_samples_equal_closed_form() {
        let coil = CylindricalCoil::default();
        let g = FieldGrid::build_with_extent(&coil, 1e-3, &small_extent()).unwrap();
        for (ir, iz) in [(0, 0), (5, 3), (17, 20), (40, 28)] {
            let r = ir as f64 * g.dr;
            let z = g.z0 + iz as f64 * g.dz;
            let (w, c) = g.sample(r, z).unwrap();
            let (wr, wz) = coil.winding_field_rz(r, z);
            let (cr, cz) = coil.core_field_rz(r, z);
            assert_eq!((w[0], w[1]), (wr, wz));
            assert_eq!((c[0], c[1]), (cr, cz));
        }
    }

    #[test]
    fn cell_centres_within_one_percent() {
        let coil = CylindricalCoil::default();
        let g = FieldGrid::build_with_extent(&coil, 1e-3, &small_extent()).unwrap();
        let mut worst: f64 = 0.0;
        for iz in 0..g.nz - 1 {
            for ir in 0..g.nr - 1 {
                let r = (ir as f64 + 0.5) * g.dr;
                let z = g.z0 + (iz as f64 + 0.5) * g.dz;
                let (w, c) = g.sample(r, z).unwrap();
                let (wr, wz) = coil.winding_field_rz(r, z);
                let (cr, cz) = coil.core_field_rz(r, z);
                let ew = ((w[0] - wr).powi(2) + (w[1] - wz).powi(2)).sqrt() / wr.hypot(wz);
                let ec = ((c[0] - cr).powi(2) + (c[1] - cz).powi(2)).sqrt() / cr.hypot(cz);
                worst = worst.max(ew).max(ec);
            }
        }
        assert!(worst < 0.01, "worst relative error {worst}");
    }

    #[test]
    fn interpolated_gradient_matches_closed_form() {
        let coil = CylindricalCoil::default();
        let g = FieldGrid::build_with_extent(&coil, 1e-3, &small_extent()).unwrap();
        for (r, z) in [(0.0123, 0.0071), (0.0, 0.0155), (0.0301, 0.0219)] {
            let (w, c) = g.sample(r, z).unwrap();
            let (we, ce) = coil.rz_samples(r, z, 1e-6);
            for (got, exact) in [(w, we), (c, ce)] {
                let scale = exact[2..].iter().map(|v| v.abs()).fold(0.0, f64::max);
                for k in 2..6 {
                    assert!(
                        (got[k] - exact[k]).abs() < 1e-2 * scale,
                        "({r},{z}) k={k}: {} vs {}",
                        got[k],
                        exact[k]
                    );
                }
            }
        }
    }

    #[test]
    fn outside_lattice_is_none() {
        let coil = CylindricalCoil::default();
        let g = FieldGrid::build_with_extent(&coil, 1e-3, &small_extent()).unwrap();
        assert!(g.sample(0.01, 0.001).is_none());
        assert!(g.sample(0.05, 0.01).is_none());
        assert!(g.sample(0.01, 0.031).is_none());
    }

    #[test]
    fn cache_round_trip_and_stale_hash() {
        let coil = CylindricalCoil::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.bin");
        let g = FieldGrid::build_with_extent(&coil, 1e-3, &small_extent()).unwrap();
        g.save(&path).unwrap();
        let back = FieldGrid::load(&path, g.params_hash).unwrap().unwrap();
        assert_eq!(back, g);
        assert!(FieldGrid::load(&path, g.params_hash ^ 1).unwrap().is_none());
        assert!(FieldGrid::load(&dir.path().join("missing.bin"), 0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn hash_depends_on_geometry_and_resolution() {
        let coil = CylindricalCoil::default();
        let e = GridExtent::default();
        let h = grid_hash(&coil, 1e-3, &e);
        assert_eq!(h, grid_hash(&coil, 1e-3, &e));
        assert_ne!(h, grid_hash(&coil, 5e-4, &e));
        let mut taller = coil.clone();
        taller.height = 0.028;
        assert_ne!(h, grid_hash(&taller, 1e-3, &e));
        // placement does not change the local-frame tabulation
        let moved = CylindricalCoil::at(crate::rigid::Vec3::new(0.1, 0.0, 0.0));
        assert_eq!(h, grid_hash(&moved, 1e-3, &e));
    }
}
