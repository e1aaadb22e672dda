//! Rigid-body dynamics of the levitated handle.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::PermanentMagnet;
use crate::rigid::{rotation_vector, Pose, Quat, Twist, Vec3, Wrench};
use crate::sensing::MarkerPlacement;

pub const GRAVITY: f64 = 9.81;
/// Largest integration step accepted by [`step_dynamics`], s.
pub const MAX_STEP: f64 = 2e-3;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("applied wrench is not finite")]
    NonFinite,
    #[error("time step {0} s outside (0, {MAX_STEP}]")]
    Step(f64),
    #[error("handle has no mass components")]
    Empty,
}

/// A lumped mass on the handle (body shell, battery, LED, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMass {
    pub name: String,
    pub mass: f64,
    /// Handle build frame, m.
    pub position: Vec3,
}

/// Handle composition. Positions are in the build frame, whose origin is
/// the midpoint between the magnet centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandleProperties {
    pub magnets: Vec<PermanentMagnet>,
    /// kg/m³
    pub magnet_density: f64,
    pub components: Vec<PointMass>,
}

impl Default for HandleProperties {
    fn default() -> Self {
        let magnet = |x: f64| PermanentMagnet {
            attach_point: Vec3::new(x, 0.0, 0.0),
            ..PermanentMagnet::default()
        };
        let mut components = vec![
            PointMass {
                name: "body".into(),
                mass: 0.025,
                position: Vec3::new(0.0, 0.0, 0.002),
            },
            PointMass {
                name: "battery".into(),
                mass: 0.012,
                position: Vec3::new(0.0, 0.0, 0.008),
            },
        ];
        for (k, led) in MarkerPlacement::default().markers().iter().enumerate() {
            components.push(PointMass {
                name: format!("led{k}"),
                mass: 0.001,
                position: led.position,
            });
        }
        Self {
            magnets: vec![magnet(0.03), magnet(-0.03)],
            magnet_density: 7500.0,
            components,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MassProperties {
    pub mass: f64,
    /// Centre of mass in the build frame.
    pub com: Vec3,
    /// Inertia about the centre of mass, body axes.
    pub inertia: Matrix3<f64>,
}

fn point_inertia(m: f64, r: &Vec3) -> Matrix3<f64> {
    (Matrix3::identity() * r.norm_squared() - r * r.transpose()) * m
}

/// Composes mass, centre of mass and inertia from the magnet cylinders and
/// point masses, with parallel-axis transfer to the centre of mass.
pub fn handle_inertia(props: &HandleProperties) -> Result<MassProperties, PlantError> {
    struct Part {
        mass: f64,
        at: Vec3,
        own: Matrix3<f64>,
    }
    let mut parts = Vec::new();
    for m in &props.magnets {
        let mass = props.magnet_density * m.volume();
        let r2 = (0.5 * m.diameter).powi(2);
        let axial = 0.5 * mass * r2;
        let transverse = mass * (3.0 * r2 + m.thickness.powi(2)) / 12.0;
        let axis = m.moment_direction.normalize();
        // cylinder inertia about its centre, oriented along its axis
        let own = Matrix3::identity() * transverse + axis * axis.transpose() * (axial - transverse);
        parts.push(Part {
            mass,
            at: m.attach_point,
            own,
        });
    }
    for c in &props.components {
        parts.push(Part {
            mass: c.mass,
            at: c.position,
            own: Matrix3::zeros(),
        });
    }
    let mass: f64 = parts.iter().map(|p| p.mass).sum();
    if parts.is_empty() || mass <= 0.0 {
        return Err(PlantError::Empty);
    }
    let com = parts.iter().map(|p| p.at * p.mass).sum::<Vec3>() / mass;
    let inertia = parts
        .iter()
        .map(|p| p.own + point_inertia(p.mass, &(p.at - com)))
        .sum();
    Ok(MassProperties { mass, com, inertia })
}

/// Handle ready for simulation: mass properties plus magnets and LEDs
/// re-expressed relative to the centre of mass.
#[derive(Clone, Debug)]
pub struct Handle {
    pub properties: HandleProperties,
    pub mass: MassProperties,
    inertia_inv: Matrix3<f64>,
    /// Magnets with attach points relative to the centre of mass.
    pub magnets: Vec<PermanentMagnet>,
    /// Bottom-rim points of the magnets, relative to the centre of mass.
    pub supports: Vec<Vec3>,
}

impl Handle {
    pub fn new(properties: HandleProperties) -> Result<Self, PlantError> {
        let mass = handle_inertia(&properties)?;
        let inertia_inv = mass.inertia.try_inverse().ok_or(PlantError::Empty)?;
        let magnets = properties
            .magnets
            .iter()
            .map(|m| PermanentMagnet {
                attach_point: m.attach_point - mass.com,
                ..m.clone()
            })
            .collect::<Vec<PermanentMagnet>>();
        let supports = magnets
            .iter()
            .flat_map(|m| {
                let axis = m.moment_direction.normalize();
                let u = axis
                    .cross(&Vec3::x())
                    .try_normalize(1e-9)
                    .unwrap_or_else(|| axis.cross(&Vec3::y()).normalize());
                let v = axis.cross(&u);
                let bottom = m.attach_point - axis * (0.5 * m.thickness);
                let r = 0.5 * m.diameter;
                (0..8).map(move |k| {
                    let a = k as f64 * std::f64::consts::FRAC_PI_4;
                    bottom + (u * a.cos() + v * a.sin()) * r
                })
            })
            .collect();
        Ok(Self {
            properties,
            mass,
            inertia_inv,
            magnets,
            supports,
        })
    }

    /// Build-frame point expressed relative to the centre of mass.
    pub fn from_build_frame(&self, p: &Vec3) -> Vec3 {
        p - self.mass.com
    }

    pub fn weight(&self) -> f64 {
        self.mass.mass * GRAVITY
    }

    pub fn inertia_inverse(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }
}

/// State of the handle. `pose` locates the centre of mass; angular velocity
/// is in body axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub time: f64,
}

impl RigidBodyState {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            time: 0.0,
        }
    }

    /// Twist with angular velocity in base-frame axes.
    pub fn world_twist(&self) -> Twist {
        Twist::new(
            self.linear_velocity,
            self.pose.orientation * self.angular_velocity,
        )
    }

    pub fn kinetic_energy(&self, mass: &MassProperties) -> f64 {
        0.5 * mass.mass * self.linear_velocity.norm_squared()
            + 0.5
                * self
                    .angular_velocity
                    .dot(&(mass.inertia * self.angular_velocity))
    }

    /// Angular momentum about the centre of mass, base frame.
    pub fn angular_momentum(&self, mass: &MassProperties) -> Vec3 {
        self.pose.orientation * (mass.inertia * self.angular_velocity)
    }
}

/// Advances the handle by `dt` under `applied` (base frame, about the centre
/// of mass; gravity is not added here).
///
/// Velocities are updated first. Position then moves with the new linear
/// velocity. The rotational update solves Euler's equations, gyroscopic
/// term included, with the implicit midpoint rule, and the orientation turns
/// by the midpoint rate, which keeps kinetic energy and world angular
/// momentum of torque-free motion.
pub fn step_dynamics(
    state: &RigidBodyState,
    applied: &Wrench,
    handle: &Handle,
    dt: f64,
) -> Result<RigidBodyState, PlantError> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(PlantError::Step(dt));
    }
    if !applied.is_finite() {
        return Err(PlantError::NonFinite);
    }
    let inertia = &handle.mass.inertia;
    let linear_velocity = state.linear_velocity + applied.force * (dt / handle.mass.mass);

    let torque_body = state.pose.orientation.inverse() * applied.torque;
    let w0 = state.angular_velocity;
    let momentum0 = inertia * w0 + torque_body * dt;
    // Newton iterations on I(w1 - w0) + dt·w̄×Iw̄ = dt·τ, w̄ = (w0 + w1)/2
    let mut w1 = handle.inertia_inv * momentum0;
    for _ in 0..8 {
        let wm = 0.5 * (w0 + w1);
        let iwm = inertia * wm;
        let residual = inertia * w1 + wm.cross(&iwm) * dt - momentum0;
        if residual.norm() <= 1e-16 * momentum0.norm().max(1e-30) {
            break;
        }
        let jac = inertia + (wm.cross_matrix() * inertia - iwm.cross_matrix()) * (0.5 * dt);
        match jac.try_inverse() {
            Some(j) => w1 -= j * residual,
            None => break,
        }
    }

    let position = state.pose.position + linear_velocity * dt;
    let orientation =
        renormalize(state.pose.orientation * Quat::from_scaled_axis((w0 + w1) * (0.5 * dt)));
    Ok(RigidBodyState {
        pose: Pose::new(position, orientation),
        linear_velocity,
        angular_velocity: w1,
        time: state.time + dt,
    })
}

fn renormalize(q: Quat) -> Quat {
    Quat::new_normalize(q.into_inner())
}

/// Screen contact. A level handle may not sink below `floor_z` (centre of
/// mass height); a tilted one may not push any magnet rim lower than the
/// rims sit when it rests level at that height. On contact the handle stops
/// moving down and stops turning. Returns whether the state was clamped.
pub fn clamp_on_screen(state: &mut RigidBodyState, handle: &Handle, floor_z: f64) -> bool {
    let rest = handle.supports.iter().map(|p| p.z).fold(0.0, f64::min);
    let lowest = handle
        .supports
        .iter()
        .map(|p| (state.pose.orientation * p).z)
        .fold(0.0, f64::min);
    let min_z = floor_z + rest - lowest;
    if state.pose.position.z < min_z {
        state.pose.position.z = min_z;
        state.linear_velocity.z = state.linear_velocity.z.max(0.0);
        state.angular_velocity = Vec3::zeros();
        true
    } else {
        false
    }
}

/// Headless stand-in for the user's grasp: a spring-damper pulling the
/// handle towards a target pose that moves along a timed path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandModel {
    /// `(time, pose)` waypoints, interpolated linearly (slerp for rotation).
    pub waypoints: Vec<(f64, Pose)>,
    /// N/m ×3 then N·m/rad ×3.
    pub stiffness: [f64; 6],
    /// N·s/m ×3 then N·m·s/rad ×3.
    pub damping: [f64; 6],
    pub enabled: bool,
}

impl Default for HandModel {
    fn default() -> Self {
        Self {
            waypoints: Vec::new(),
            stiffness: [50.0, 50.0, 50.0, 0.05, 0.05, 0.05],
            damping: [2.0, 2.0, 2.0, 0.002, 0.002, 0.002],
            enabled: false,
        }
    }
}

impl HandModel {
    pub fn holding(pose: Pose) -> Self {
        Self {
            waypoints: vec![(0.0, pose)],
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self
            .stiffness
            .iter()
            .chain(&self.damping)
            .any(|v| !(*v >= 0.0))
        {
            return Err("hand stiffness and damping must be non-negative".into());
        }
        if self.waypoints.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err("hand waypoints must be time-ordered".into());
        }
        Ok(())
    }

    /// Target pose and velocity (angular part in base axes) at time `t`.
    pub fn target_at(&self, t: f64) -> Option<(Pose, Twist)> {
        let first = self.waypoints.first()?;
        if t <= first.0 || self.waypoints.len() == 1 {
            return Some((first.1, Twist::zero()));
        }
        let last = self.waypoints.last().expect("non-empty");
        if t >= last.0 {
            return Some((last.1, Twist::zero()));
        }
        let k = self.waypoints.partition_point(|(wt, _)| *wt <= t);
        let (t0, p0) = self.waypoints[k - 1];
        let (t1, p1) = self.waypoints[k];
        let span = t1 - t0;
        let s = if span > 0.0 { (t - t0) / span } else { 1.0 };
        let pose = Pose::new(
            p0.position.lerp(&p1.position, s),
            p0.orientation.slerp(&p1.orientation, s),
        );
        let twist = if span > 0.0 {
            Twist::new(
                (p1.position - p0.position) / span,
                rotation_vector(&(p1.orientation * p0.orientation.inverse())) / span,
            )
        } else {
            Twist::zero()
        };
        Some((pose, twist))
    }

    /// Replaces the path with a single held target.
    pub fn set_target(&mut self, pose: Pose) {
        self.waypoints = vec![(0.0, pose)];
    }
}

/// Spring-damper wrench from the hand on the handle at time `t`; zero when
/// the hand is disabled or has no target.
pub fn hand_impedance_wrench(state: &RigidBodyState, hand: &HandModel, t: f64) -> Wrench {
    if !hand.enabled {
        return Wrench::zero();
    }
    let Some((target, target_twist)) = hand.target_at(t) else {
        return Wrench::zero();
    };
    let k = &hand.stiffness;
    let d = &hand.damping;
    let twist = state.world_twist();
    let dp = target.position - state.pose.position;
    let dv = target_twist.linear - twist.linear;
    let dr = state.pose.rotation_error_to(&target);
    let dw = target_twist.angular - twist.angular;
    let f = Vec3::from_fn(|i, _| k[i] * dp[i] + d[i] * dv[i]);
    let tau = Vec3::from_fn(|i, _| k[3 + i] * dr[i] + d[3 + i] * dw[i]);
    Wrench::new(f, tau)
}
