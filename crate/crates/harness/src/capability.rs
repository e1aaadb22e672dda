//! Hover feasibility and force capability over a lattice of handle
//! positions.

use std::io::Write;

use maglev_core::allocation::{hover_wrench, Allocator};
use maglev_core::control::TwinConfig;
use maglev_core::magnetics::{ActuationModel, CoilArray, FieldSource, MagneticsError};
use maglev_core::plant::{Handle, GRAVITY};
use maglev_core::{Pose, Vec3, Wrench};
use serde::Serialize;

use crate::HarnessError;

/// One lattice point. Capabilities are forces beyond hover, N; zero where
/// hover itself is infeasible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CapabilityRow {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub hover_feasible: bool,
    pub hover_peak_current: f64,
    pub plus_x: f64,
    pub minus_x: f64,
    pub plus_y: f64,
    pub minus_y: f64,
    pub plus_z: f64,
    pub minus_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSpec {
    pub heights: Vec<f64>,
    pub step: f64,
    /// Half-width of the square lattice in x and y.
    pub half_width: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            heights: vec![0.01, 0.02, 0.03, 0.04],
            step: 0.01,
            half_width: 0.04,
        }
    }
}

fn model_at(
    array: &CoilArray,
    handle: &Handle,
    pose: &Pose,
) -> Result<ActuationModel, MagneticsError> {
    match ActuationModel::at_pose(array, pose, &handle.magnets, FieldSource::Grid) {
        Err(MagneticsError::Coverage { .. }) => {
            ActuationModel::at_pose(array, pose, &handle.magnets, FieldSource::Oracle)
        }
        other => other,
    }
}

pub fn capability_at(
    array: &CoilArray,
    config: &TwinConfig,
    position: Vec3,
) -> Result<CapabilityRow, HarnessError> {
    let handle = config.handle()?;
    let allocator = Allocator::new(config.allocator.clone());
    let pose = Pose::new(position, Pose::identity().orientation);
    let mut row = CapabilityRow {
        x: position.x,
        y: position.y,
        z: position.z,
        hover_feasible: false,
        hover_peak_current: f64::NAN,
        plus_x: 0.0,
        minus_x: 0.0,
        plus_y: 0.0,
        minus_y: 0.0,
        plus_z: 0.0,
        minus_z: 0.0,
    };
    let Ok(model) = model_at(array, &handle, &pose) else {
        return Ok(row);
    };
    let bias = hover_wrench(&model, handle.mass.mass, GRAVITY);
    let Ok(hover) = allocator.allocate_settled(&model, &bias, &Default::default()) else {
        return Ok(row);
    };
    row.hover_peak_current = hover.max_abs();
    row.hover_feasible = !hover.saturated;
    if row.hover_feasible {
        let cap = |d: Vec3| allocator.capability(&model, &Wrench::from_force(d), &bias);
        row.plus_x = cap(Vec3::x());
        row.minus_x = cap(-Vec3::x());
        row.plus_y = cap(Vec3::y());
        row.minus_y = cap(-Vec3::y());
        row.plus_z = cap(Vec3::z());
        row.minus_z = cap(-Vec3::z());
    }
    Ok(row)
}

fn lattice(half_width: f64, step: f64) -> Vec<f64> {
    let n = (half_width / step).round() as i64;
    (-n..=n).map(|k| k as f64 * step).collect()
}

/// Evaluates the map, spreading lattice points over the available cores.
pub fn capability_map(
    array: &CoilArray,
    config: &TwinConfig,
    spec: &MapSpec,
) -> Result<Vec<CapabilityRow>, HarnessError> {
    if !(spec.step > 0.0) || spec.heights.iter().any(|z| !(*z > 0.0)) {
        return Err(HarnessError::Invalid(
            "capability map: step and heights must be > 0".into(),
        ));
    }
    let xs = lattice(spec.half_width, spec.step);
    let mut points = Vec::new();
    for &z in &spec.heights {
        for &y in &xs {
            points.extend(xs.iter().map(|&x| Vec3::new(x, y, z)));
        }
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(points.len().max(1));
    let chunk = points.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|p| capability_at(array, config, *p))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("capability worker"))
            .collect()
    })
}

pub fn write_csv<W: Write>(rows: &[CapabilityRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| HarnessError::io(std::path::Path::new("<capability csv>"), e))?;
    Ok(())
}
