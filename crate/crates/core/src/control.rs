//! The fixed-rate loop: sense, estimate pose and twist, compute the mode
//! wrench, allocate currents, then advance the simulated handle.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{hover_wrench, AllocationError, Allocator, AllocatorConfig, CurrentVector};
use crate::haptics::{self, Contact, Scene, SCREEN_THICKNESS};
use crate::magnetics::{
    ActuationModel, ArrayLayout, CoilArray, Currents, CylindricalCoil, FieldSource, MagneticsError,
};
use crate::plant::{self, HandModel, Handle, HandleProperties, RigidBodyState, GRAVITY};
use crate::rigid::{rotation_vector, Pose, Twist, Vec3, Wrench};
use crate::sensing::{
    estimate_pose, forward_measure, EstimatorConfig, MarkerPlacement, PsdReading, SensingError,
    SensorPlacement, SensorRig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    /// N/m ×3 then N·m/rad ×3.
    pub kp: [f64; 6],
    /// N·s/m ×3 then N·m·s/rad ×3.
    pub kd: [f64; 6],
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp: [4000.0, 1500.0, 10000.0, 0.2, 1.6, 1.6],
            kd: [35.0, 20.0, 60.0, 0.002, 0.016, 0.016],
        }
    }
}

impl ControllerGains {
    pub fn zero() -> Self {
        Self {
            kp: [0.0; 6],
            kd: [0.0; 6],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("kp", &self.kp), ("kd", &self.kd)] {
            if let Some(k) = v.iter().position(|g| !(*g >= 0.0 && g.is_finite())) {
                return Err(format!("gains.{name}[{k}] must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// One segment of a waypoint path: move to `pose` over `duration` with a
/// minimum-jerk profile, then hold for `hold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub pose: Pose,
    pub duration: f64,
    #[serde(default)]
    pub hold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Hold {
        pose: Pose,
    },
    Step {
        from: Pose,
        to: Pose,
        at: f64,
    },
    /// `center + amplitude·sin(2π f t)`, translation only.
    Sinusoid {
        center: Pose,
        amplitude: Vec3,
        frequency: f64,
    },
    Waypoints {
        start: Pose,
        points: Vec<Waypoint>,
    },
}

/// Reference pose and twist (angular part in base axes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setpoint {
    pub pose: Pose,
    pub twist: Twist,
}

fn min_jerk(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let p = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let v = 30.0 * s * s * (1.0 - s) * (1.0 - s);
    (p, v)
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Trajectory::Sinusoid { frequency, .. } if !(*frequency >= 0.0) => {
                Err("trajectory.frequency must be >= 0".into())
            }
            Trajectory::Waypoints { points, .. } => {
                if points
                    .iter()
                    .any(|w| !(w.duration > 0.0) || !(w.hold >= 0.0))
                {
                    Err("trajectory.points: duration must be > 0 and hold >= 0".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn setpoint(&self, t: f64) -> Setpoint {
        let still = |pose: Pose| Setpoint {
            pose,
            twist: Twist::zero(),
        };
        match self {
            Trajectory::Hold { pose } => still(*pose),
            Trajectory::Step { from, to, at } => still(if t < *at { *from } else { *to }),
            Trajectory::Sinusoid {
                center,
                amplitude,
                frequency,
            } => {
                let w = 2.0 * std::f64::consts::PI * frequency;
                Setpoint {
                    pose: Pose::new(
                        center.position + amplitude * (w * t).sin(),
                        center.orientation,
                    ),
                    twist: Twist::new(amplitude * (w * (w * t).cos()), Vec3::zeros()),
                }
            }
            Trajectory::Waypoints { start, points } => {
                let mut from = *start;
                let mut t0 = 0.0;
                for wp in points {
                    if t < t0 + wp.duration {
                        let (s, ds) = min_jerk((t - t0) / wp.duration);
                        let rate = ds / wp.duration;
                        let turn = wp.pose.orientation * from.orientation.inverse();
                        return Setpoint {
                            pose: Pose::new(
                                from.position.lerp(&wp.pose.position, s),
                                from.orientation.slerp(&wp.pose.orientation, s),
                            ),
                            twist: Twist::new(
                                (wp.pose.position - from.position) * rate,
                                rotation_vector(&turn) * rate,
                            ),
                        };
                    }
                    t0 += wp.duration + wp.hold;
                    from = wp.pose;
                    if t < t0 {
                        return still(from);
                    }
                }
                still(from)
            }
        }
    }

    /// Time at which the reference stops moving (infinite for sinusoids).
    pub fn settle_time(&self) -> f64 {
        match self {
            Trajectory::Hold { .. } => 0.0,
            Trajectory::Step { at, .. } => *at,
            Trajectory::Sinusoid { .. } => f64::INFINITY,
            Trajectory::Waypoints { points, .. } => {
                points.iter().map(|w| w.duration + w.hold).sum()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMode {
    MotionControl { trajectory: Trajectory },
    HapticInteraction,
}

impl ControlMode {
    pub fn code(&self) -> u8 {
        match self {
            ControlMode::MotionControl { .. } => 0,
            ControlMode::HapticInteraction => 1,
        }
    }
}

/// Velocity estimate from successive pose estimates, low-pass filtered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistFilter {
    pub cutoff_hz: f64,
    pub state: Twist,
}

impl TwistFilter {
    pub fn new(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            state: Twist::zero(),
        }
    }
}

/// Finite-difference twist between two poses (`dt` apart), passed through a
/// single-pole low-pass. Angular velocity is in base axes.
pub fn estimate_twist(now: &Pose, prev: &Pose, dt: f64, filter: &mut TwistFilter) -> Twist {
    assert!(dt > 0.0, "twist estimate needs a positive interval");
    let raw_v = (now.position - prev.position) / dt;
    let raw_w = rotation_vector(&(now.orientation * prev.orientation.inverse())) / dt;
    let tau = 1.0 / (2.0 * std::f64::consts::PI * filter.cutoff_hz);
    let alpha = 1.0 - (-dt / tau).exp();
    let s = &mut filter.state;
    s.linear += (raw_v - s.linear) * alpha;
    s.angular += (raw_w - s.angular) * alpha;
    *s
}

/// PD servo plus gravity feed-forward, minus the cogging wrench the coils
/// must cancel. The result is the wrench requested from the coil currents.
pub fn motion_control_wrench(
    pose: &Pose,
    twist: &Twist,
    setpoint: &Setpoint,
    gains: &ControllerGains,
    mass: f64,
    cogging: &Wrench,
) -> Wrench {
    let ep = setpoint.pose.position - pose.position;
    let er = pose.rotation_error_to(&setpoint.pose);
    let ev = setpoint.twist.linear - twist.linear;
    let ew = setpoint.twist.angular - twist.angular;
    let (kp, kd) = (&gains.kp, &gains.kd);
    let force =
        Vec3::from_fn(|i, _| kp[i] * ep[i] + kd[i] * ev[i]) + Vec3::new(0.0, 0.0, mass * GRAVITY);
    let torque = Vec3::from_fn(|i, _| kp[3 + i] * er[i] + kd[3 + i] * ew[i]);
    Wrench::new(force, torque) - *cogging
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub velocity_cutoff_hz: f64,
    pub cogging_compensation: bool,
    /// Relative error applied to the cogging model used for compensation.
    pub cogging_gain_error: f64,
    /// Consecutive estimator failures tolerated with held currents.
    pub max_estimator_failures: usize,
    /// Secant refinements of the allocation per tick.
    pub allocation_refinements: usize,
    /// Lowest centre-of-mass height; the screen stops the handle here.
    pub floor_height: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            velocity_cutoff_hz: 200.0,
            cogging_compensation: true,
            cogging_gain_error: 0.0,
            max_estimator_failures: 5,
            allocation_refinements: 2,
            floor_height: SCREEN_THICKNESS,
        }
    }
}

/// Everything needed to build a [`Twin`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub rate_hz: f64,
    pub coil: CylindricalCoil,
    pub layout: ArrayLayout,
    pub neighbor_coupling: bool,
    pub grid_resolution: f64,
    pub grid_cache_dir: Option<PathBuf>,
    /// Field evaluation used by the controller's models.
    pub control_field_source: FieldSource,
    /// Field evaluation used to move the simulated handle.
    pub plant_field_source: FieldSource,
    pub handle: HandleProperties,
    pub sensors: SensorPlacement,
    pub markers: MarkerPlacement,
    pub estimator: EstimatorConfig,
    pub gains: ControllerGains,
    pub allocator: AllocatorConfig,
    pub control: ControlConfig,
    pub hand: HandModel,
    pub scene: Scene,
    pub initial_pose: Pose,
    pub mode: ControlMode,
}

impl Default for TwinConfig {
    fn default() -> Self {
        let hover = Pose::from_translation(0.0, 0.0, 0.02);
        Self {
            rate_hz: 2000.0,
            coil: CylindricalCoil::default(),
            layout: ArrayLayout::default(),
            neighbor_coupling: false,
            grid_resolution: 1e-3,
            grid_cache_dir: None,
            control_field_source: FieldSource::Grid,
            plant_field_source: FieldSource::Grid,
            handle: HandleProperties::default(),
            sensors: SensorPlacement::default(),
            markers: MarkerPlacement::default(),
            estimator: EstimatorConfig::default(),
            gains: ControllerGains::default(),
            allocator: AllocatorConfig::default(),
            control: ControlConfig::default(),
            hand: HandModel::default(),
            scene: Scene::default(),
            initial_pose: hover,
            mode: ControlMode::MotionControl {
                trajectory: Trajectory::Hold { pose: hover },
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TwinConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: TwinConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(500.0..=2000.0).contains(&self.rate_hz) {
            return bad(format!(
                "rate_hz must be within [500, 2000], got {}",
                self.rate_hz
            ));
        }
        if !(self.grid_resolution > 0.0 && self.grid_resolution <= 1e-3) {
            return bad("grid_resolution must be in (0, 0.001] m".into());
        }
        self.coil
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("coil: {e}")))?;
        self.gains.validate().map_err(ConfigError::Invalid)?;
        self.hand
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("hand: {e}")))?;
        self.scene
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let ControlMode::MotionControl { trajectory } = &self.mode {
            trajectory
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("mode.{e}")))?;
        }
        for m in &self.handle.magnets {
            m.validate()
                .map_err(|e| ConfigError::Invalid(format!("handle.magnets: {e}")))?;
        }
        let a = &self.allocator;
        if !(a.current_limit > 0.0) || !(a.damping >= 0.0) || !(a.torque_length > 0.0) {
            return bad(
                "allocator: current_limit and torque_length must be > 0, damping >= 0".into(),
            );
        }
        let c = &self.control;
        if !(c.velocity_cutoff_hz > 0.0) {
            return bad("control.velocity_cutoff_hz must be > 0".into());
        }
        if !(c.cogging_gain_error.abs() < 1.0) {
            return bad("control.cogging_gain_error must be within (-1, 1)".into());
        }
        if !(self.estimator.max_iterations >= 1 && self.estimator.step_tolerance > 0.0) {
            return bad("estimator: max_iterations >= 1 and step_tolerance > 0".into());
        }
        if !(self.sensors.noise_std >= 0.0) {
            return bad("sensors.noise_std must be >= 0".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn handle(&self) -> Result<Handle, ConfigError> {
        Handle::new(self.handle.clone()).map_err(|e| ConfigError::Invalid(format!("handle: {e}")))
    }

    /// Sensors and markers, with the markers expressed about the handle's
    /// centre of mass.
    pub fn sensor_rig(&self) -> Result<SensorRig, ConfigError> {
        let com = self.handle()?.mass.com;
        Ok(
            SensorRig::from_placement(&self.sensors, self.markers.markers())?
                .with_marker_offset(&-com),
        )
    }

    /// Coil array with field grids attached (built or loaded from the cache).
    pub fn build_array(&self) -> Result<CoilArray, ConfigError> {
        let mut array = CoilArray::from_layout(&self.layout, &self.coil)?;
        if self.neighbor_coupling {
            array = CoilArray::new(array.coils().to_vec(), true)?;
        }
        if self.control_field_source == FieldSource::Grid
            || self.plant_field_source == FieldSource::Grid
        {
            array.attach_grids(self.grid_resolution, self.grid_cache_dir.as_deref())?;
        }
        Ok(array)
    }
}

/// External inputs, applied only at tick boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    SetMode {
        mode: ControlMode,
    },
    /// Motion control holding `pose`.
    SetSetpoint {
        pose: Pose,
    },
    SetHandTarget {
        pose: Pose,
    },
    SetHandEnabled {
        enabled: bool,
    },
    SetGains {
        gains: ControllerGains,
    },
    SetScene {
        scene: Scene,
    },
    /// Invalidate all sensor readings for the next `ticks` ticks.
    InjectBlackout {
        ticks: usize,
    },
    /// Clear a safe-stop and re-seed the estimator at the true pose.
    Reset,
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("handle left the modelled field region: {0}")]
    Plant(MagneticsError),
    #[error("plant step: {0}")]
    Step(#[from] plant::PlantError),
}

/// Per-tick compute durations, most recent last.
#[derive(Clone, Debug)]
pub struct LoopTiming {
    pub rate_hz: f64,
    pub budget: Duration,
    pub durations: VecDeque<Duration>,
    capacity: usize,
}

impl LoopTiming {
    pub fn new(rate_hz: f64, capacity: usize) -> Self {
        Self {
            rate_hz,
            budget: Duration::from_secs_f64(1.0 / rate_hz),
            durations: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, d: Duration) {
        if self.durations.len() == self.capacity {
            self.durations.pop_front();
        }
        self.durations.push_back(d);
    }
}

/// Summary statistics of tick compute times, microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TimingStats {
    pub ticks: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl TimingStats {
    pub fn from_durations<'a>(durations: impl IntoIterator<Item = &'a Duration>) -> Self {
        let mut us: Vec<f64> = durations
            .into_iter()
            .map(|d| d.as_secs_f64() * 1e6)
            .collect();
        if us.is_empty() {
            return Self::default();
        }
        us.sort_by(f64::total_cmp);
        let pick = |q: f64| us[((q * us.len() as f64).ceil() as usize).clamp(1, us.len()) - 1];
        Self {
            ticks: us.len(),
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p50_us: pick(0.5),
            p99_us: pick(0.99),
            max_us: *us.last().expect("non-empty"),
        }
    }
}

/// Everything that happened in one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub mode: u8,
    pub true_pose: Pose,
    pub true_twist: Twist,
    pub estimated_pose: Pose,
    pub estimated_twist: Twist,
    pub setpoint: Pose,
    pub valid_measurements: usize,
    pub estimator_iterations: usize,
    pub estimator_ok: bool,
    pub estimator_residual: f64,
    pub failures: usize,
    pub safe_stop: bool,
    /// Wrench requested from the coils (beyond cogging).
    pub commanded: Wrench,
    /// Magnetic wrench actually applied to the handle.
    pub applied: Wrench,
    pub hand: Wrench,
    pub currents: Currents,
    pub saturated: bool,
    pub floor_contact: bool,
    pub contacts: Vec<Contact>,
    /// Contact force on the tool (haptic mode).
    pub tool_force: Vec3,
    /// Largest friction-to-normal force ratio over this tick's contacts
    /// divided by the contact's friction coefficient (≤ 1 inside the cone).
    pub friction_ratio: f64,
    /// Residual of tool force plus reactions.
    pub reaction_residual: f64,
    pub compute: Duration,
}

impl TickRecord {
    /// CSV column names, matching [`TickRecord::values`].
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["tick", "time", "mode"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let pose = |p: &str| ["x", "y", "z", "qw", "qx", "qy", "qz"].map(|c| format!("{p}_{c}"));
        let twist = |p: &str| ["vx", "vy", "vz", "wx", "wy", "wz"].map(|c| format!("{p}_{c}"));
        let wrench = |p: &str| ["fx", "fy", "fz", "tx", "ty", "tz"].map(|c| format!("{p}_{c}"));
        h.extend(pose("true"));
        h.extend(twist("true"));
        h.extend(pose("est"));
        h.extend(twist("est"));
        h.extend(pose("ref"));
        for s in [
            "valid",
            "est_iters",
            "est_ok",
            "est_residual",
            "failures",
            "safe_stop",
        ] {
            h.push(s.into());
        }
        h.extend(wrench("cmd"));
        h.extend(wrench("applied"));
        h.extend(wrench("hand"));
        h.extend((0..12).map(|k| format!("i{k}")));
        for s in [
            "saturated",
            "floor",
            "contacts",
            "tool_fx",
            "tool_fy",
            "tool_fz",
            "friction_ratio",
            "reaction_residual",
        ] {
            h.push(s.into());
        }
        h
    }

    /// Row values, formatted with the shortest round-trip representation so
    /// that identical runs give identical text.
    pub fn values(&self) -> Vec<String> {
        let mut v = vec![self.tick.to_string(), fmt(self.time), self.mode.to_string()];
        let mut nums = |xs: &[f64]| v.extend(xs.iter().map(|x| fmt(*x)));
        nums(&self.true_pose.to_array());
        nums(&self.true_twist.to_array());
        nums(&self.estimated_pose.to_array());
        nums(&self.estimated_twist.to_array());
        nums(&self.setpoint.to_array());
        v.push(self.valid_measurements.to_string());
        v.push(self.estimator_iterations.to_string());
        v.push((self.estimator_ok as u8).to_string());
        v.push(fmt(self.estimator_residual));
        v.push(self.failures.to_string());
        v.push((self.safe_stop as u8).to_string());
        let mut nums = |xs: &[f64]| v.extend(xs.iter().map(|x| fmt(*x)));
        nums(&self.commanded.to_array());
        nums(&self.applied.to_array());
        nums(&self.hand.to_array());
        nums(self.currents.as_slice());
        v.push((self.saturated as u8).to_string());
        v.push((self.floor_contact as u8).to_string());
        v.push(self.contacts.len().to_string());
        v.extend([self.tool_force.x, self.tool_force.y, self.tool_force.z].map(fmt));
        v.push(fmt(self.friction_ratio));
        v.push(fmt(self.reaction_residual));
        v
    }
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// The simulated device and its controller.
pub struct Twin {
    pub config: TwinConfig,
    array: Arc<CoilArray>,
    pub handle: Handle,
    pub rig: SensorRig,
    allocator: Allocator,
    pub state: RigidBodyState,
    pub estimate: Pose,
    estimate_time: f64,
    twist_filter: TwistFilter,
    pub currents: CurrentVector,
    failures: usize,
    pub safe_stop: bool,
    pub mode: ControlMode,
    pub scene: Scene,
    pub hand: HandModel,
    rng: ChaCha8Rng,
    tick: u64,
    pub timing: LoopTiming,
    queue: VecDeque<Command>,
    blackout: usize,
}

impl Twin {
    pub fn new(config: TwinConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let array = Arc::new(config.build_array()?);
        Self::with_array(config, array, seed)
    }

    /// Builds a twin around an existing coil array (to share field grids).
    pub fn with_array(
        config: TwinConfig,
        array: Arc<CoilArray>,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let handle = config.handle()?;
        let rig = config.sensor_rig()?;
        let allocator = Allocator::new(config.allocator.clone());
        let state = RigidBodyState::at_rest(config.initial_pose);
        let model = ActuationModel::at_pose(
            &array,
            &state.pose,
            &handle.magnets,
            config.control_field_source,
        )?;
        let currents = allocator
            .allocate_settled(
                &model,
                &hover_wrench(&model, handle.mass.mass, GRAVITY),
                &Currents::zeros(),
            )
            .unwrap_or(CurrentVector::zero());
        Ok(Self {
            estimate: state.pose,
            estimate_time: 0.0,
            twist_filter: TwistFilter::new(config.control.velocity_cutoff_hz),
            currents,
            failures: 0,
            safe_stop: false,
            mode: config.mode.clone(),
            scene: config.scene.clone(),
            hand: config.hand.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            timing: LoopTiming::new(config.rate_hz, 1 << 16),
            queue: VecDeque::new(),
            blackout: 0,
            array,
            handle,
            rig,
            allocator,
            state,
            config,
        })
    }

    pub fn array(&self) -> &Arc<CoilArray> {
        &self.array
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    pub fn enqueue(&mut self, command: Command) {
        self.queue.push_back(command);
    }

    fn apply_commands(&mut self) {
        while let Some(c) = self.queue.pop_front() {
            match c {
                Command::SetMode { mode } => self.mode = mode,
                Command::SetSetpoint { pose } => {
                    self.mode = ControlMode::MotionControl {
                        trajectory: Trajectory::Hold { pose },
                    }
                }
                Command::SetHandTarget { pose } => self.hand.set_target(pose),
                Command::SetHandEnabled { enabled } => self.hand.enabled = enabled,
                Command::SetGains { gains } => self.config.gains = gains,
                Command::SetScene { scene } => self.scene = scene,
                Command::InjectBlackout { ticks } => self.blackout = ticks,
                Command::Reset => {
                    self.safe_stop = false;
                    self.failures = 0;
                    self.estimate = self.state.pose;
                    self.estimate_time = self.state.time;
                    self.twist_filter.state = Twist::zero();
                }
            }
        }
    }

    /// Builds the actuation model, falling back to the exact field where the
    /// grid does not reach.
    fn model_at(&self, pose: &Pose, source: FieldSource) -> Result<ActuationModel, MagneticsError> {
        match ActuationModel::at_pose(&self.array, pose, &self.handle.magnets, source) {
            Err(MagneticsError::Coverage { .. }) => ActuationModel::at_pose(
                &self.array,
                pose,
                &self.handle.magnets,
                FieldSource::Oracle,
            ),
            other => other,
        }
    }

    /// Runs one control period and advances the simulation by `1/rate`.
    pub fn tick(&mut self) -> Result<TickRecord, ControlError> {
        let started = Instant::now();
        self.apply_commands();
        let dt = self.config.dt();
        let t = self.state.time;
        let mass = self.handle.mass.mass;

        let mut readings = forward_measure(&self.state.pose, &self.rig, t, &mut self.rng);
        if self.blackout > 0 {
            self.blackout -= 1;
            readings.readings = [PsdReading::INVALID; 3];
        }
        let valid = readings.valid_count();
        let estimate = estimate_pose(&readings, &self.estimate, &self.rig, &self.config.estimator);

        let mut setpoint = self.estimate;
        let mut commanded = Wrench::zero();
        let mut tool_force = Vec3::zeros();
        let mut contact_list = Vec::new();
        let mut friction_ratio: f64 = 0.0;
        let mut reaction_residual: f64 = 0.0;
        let mut reactions = Vec::new();
        let (iterations, residual, estimator_ok) = match &estimate {
            Ok(e) => (e.iterations, e.rms_residual, true),
            Err(SensingError::Diverged { best, .. }) => (best.iterations, best.rms_residual, false),
            Err(_) => (0, f64::NAN, false),
        };

        let model = match &estimate {
            Ok(e) => self
                .model_at(&e.pose, self.config.control_field_source)
                .ok(),
            Err(_) => None,
        };
        match (&estimate, model) {
            (Ok(e), Some(model)) => {
                self.failures = 0;
                let span = t - self.estimate_time;
                let twist = if span > 0.0 {
                    estimate_twist(&e.pose, &self.estimate, span, &mut self.twist_filter)
                } else {
                    self.twist_filter.state
                };
                self.estimate = e.pose;
                self.estimate_time = t;

                let cogging = if self.config.control.cogging_compensation {
                    model
                        .cogging()
                        .scaled(1.0 + self.config.control.cogging_gain_error)
                } else {
                    Wrench::zero()
                };
                commanded = match &self.mode {
                    ControlMode::MotionControl { trajectory } => {
                        let sp = trajectory.setpoint(t);
                        setpoint = sp.pose;
                        motion_control_wrench(
                            &e.pose,
                            &twist,
                            &sp,
                            &self.config.gains,
                            mass,
                            &cogging,
                        )
                    }
                    ControlMode::HapticInteraction => {
                        let tool = haptics::tool_pose_from_handle(
                            &e.pose,
                            SCREEN_THICKNESS,
                            self.scene.tool.extension,
                        );
                        let tool_lever =
                            tool.position + Vec3::new(0.0, 0.0, SCREEN_THICKNESS) - e.pose.position;
                        let tool_twist = Twist::new(
                            twist.linear + twist.angular.cross(&tool_lever),
                            twist.angular,
                        );
                        let contacts = haptics::detect_contacts(
                            &tool.position,
                            self.scene.tool.tip_radius,
                            &self.scene,
                        );
                        let result =
                            haptics::contact_wrench(&contacts, &tool, &tool_twist, &self.scene);
                        tool_force = result.tool.force;
                        for (k, c) in contacts.iter().enumerate() {
                            let mu = self.scene.objects[c.object].friction;
                            if mu > 0.0 && result.normal_forces[k] > 0.0 {
                                friction_ratio = friction_ratio.max(
                                    result.tangential_forces[k] / (mu * result.normal_forces[k]),
                                );
                            }
                        }
                        let balance = result
                            .reactions
                            .iter()
                            .fold(result.tool.force, |acc, r| acc + r.force);
                        reaction_residual = balance.norm();
                        reactions = result.reactions;
                        contact_list = contacts;
                        let on_handle = Wrench::new(
                            result.tool.force,
                            result.tool.torque + tool_lever.cross(&result.tool.force),
                        );
                        on_handle + Wrench::from_force(Vec3::new(0.0, 0.0, mass * GRAVITY))
                            - cogging
                    }
                };
                if !self.safe_stop {
                    let mut out =
                        self.allocator
                            .allocate(&model, &commanded, &self.currents.currents);
                    for _ in 0..self.config.control.allocation_refinements {
                        match &out {
                            Ok(c) => out = self.allocator.allocate(&model, &commanded, &c.currents),
                            Err(_) => break,
                        }
                    }
                    match out {
                        Ok(c) => self.currents = c,
                        Err(AllocationError::Conditioning { .. } | AllocationError::NonFinite) => {
                            self.currents = CurrentVector::zero()
                        }
                    }
                }
            }
            _ => {
                self.failures += 1;
                if self.failures > self.config.control.max_estimator_failures {
                    self.safe_stop = true;
                }
            }
        }
        if self.safe_stop {
            self.currents = CurrentVector::zero();
        }

        let plant_model = self
            .model_at(&self.state.pose, self.config.plant_field_source)
            .map_err(ControlError::Plant)?;
        let applied = plant_model.wrench(&self.currents.currents);
        let hand = plant::hand_impedance_wrench(&self.state, &self.hand, t);
        let gravity = Wrench::from_force(Vec3::new(0.0, 0.0, -mass * GRAVITY));
        let mut next =
            plant::step_dynamics(&self.state, &(applied + hand + gravity), &self.handle, dt)?;
        let floor_contact =
            plant::clamp_on_screen(&mut next, &self.handle, self.config.control.floor_height);
        let true_twist = self.state.world_twist();
        let true_pose = self.state.pose;
        self.state = next;

        if matches!(self.mode, ControlMode::HapticInteraction) {
            haptics::step_scene(&mut self.scene, &reactions, dt);
        }

        let compute = started.elapsed();
        self.timing.push(compute);
        let record = TickRecord {
            tick: self.tick,
            time: t,
            mode: self.mode.code(),
            true_pose,
            true_twist,
            estimated_pose: self.estimate,
            estimated_twist: self.twist_filter.state,
            setpoint,
            valid_measurements: valid,
            estimator_iterations: iterations,
            estimator_ok,
            estimator_residual: residual,
            failures: self.failures,
            safe_stop: self.safe_stop,
            commanded,
            applied,
            hand,
            currents: self.currents.currents,
            saturated: self.currents.saturated,
            floor_contact,
            contacts: contact_list,
            tool_force,
            friction_ratio,
            reaction_residual,
            compute,
        };
        self.tick += 1;
        Ok(record)
    }

    pub fn timing_stats(&self) -> TimingStats {
        TimingStats::from_durations(&self.timing.durations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn twist_filter_examples() {
        let mut f = TwistFilter::new(200.0);
        let p = Pose::from_translation(0.0, 0.0, 0.02);
        for _ in 0..50 {
            estimate_twist(&p, &p, 5e-4, &mut f);
        }
        assert_eq!(f.state, Twist::zero());

        let mut f = TwistFilter::new(200.0);
        let dt = 5e-4;
        let tau = 1.0 / (2.0 * std::f64::consts::PI * 200.0);
        let steps = (5.0 * tau / dt).ceil() as usize;
        let mut prev = p;
        for k in 1..=steps {
            let now = Pose::from_translation(0.1 * dt * k as f64, 0.0, 0.02);
            estimate_twist(&now, &prev, dt, &mut f);
            prev = now;
        }
        assert!((f.state.linear.x - 0.1).abs() < 0.1 * (-5.0f64).exp());

        let mut f = TwistFilter::new(200.0);
        let jump = Pose::from_translation(0.001, 0.0, 0.02);
        let raw = 0.001 / dt;
        let out = estimate_twist(&jump, &p, dt, &mut f);
        assert!(out.linear.x > 0.0 && out.linear.x <= raw);
    }

    #[test]
    fn motion_wrench_examples() {
        let mass = 0.078;
        let pose = Pose::from_translation(0.0, 0.0, 0.02);
        let sp = Setpoint {
            pose,
            twist: Twist::zero(),
        };
        let gains = ControllerGains::default();
        let w = motion_control_wrench(&pose, &Twist::zero(), &sp, &gains, mass, &Wrench::zero());
        assert_relative_eq!(w.force.z, 0.765, epsilon = 1e-3);
        assert_eq!(w.torque, Vec3::zeros());

        let mut g = ControllerGains::zero();
        g.kp[0] = 100.0;
        let off = Pose::from_translation(-0.001, 0.0, 0.02);
        let w = motion_control_wrench(&off, &Twist::zero(), &sp, &g, mass, &Wrench::zero());
        assert_relative_eq!(w.force.x, 0.1, epsilon = 1e-12);

        let mut g = ControllerGains::zero();
        g.kd[0] = 2.0;
        let approaching = Twist::new(Vec3::new(0.1, 0.0, 0.0), Vec3::zeros());
        let w = motion_control_wrench(&off, &approaching, &sp, &g, mass, &Wrench::zero());
        assert_relative_eq!(w.force.x, -0.2, epsilon = 1e-12);
    }

    #[test]
    fn waypoints_are_smooth_and_end_at_rest() {
        let a = Pose::from_translation(0.0, 0.0, 0.02);
        let b = Pose::from_xyz_rpy(0.01, 0.0, 0.03, 0.0, 0.0, 0.5);
        let traj = Trajectory::Waypoints {
            start: a,
            points: vec![Waypoint {
                pose: b,
                duration: 1.0,
                hold: 0.5,
            }],
        };
        assert_relative_eq!(
            traj.setpoint(0.0).pose.position,
            a.position,
            epsilon = 1e-15
        );
        let mid = traj.setpoint(0.5);
        assert_relative_eq!(mid.pose.position.x, 0.005, epsilon = 1e-12);
        assert_relative_eq!(mid.twist.linear.x, 0.01 * 1.875, epsilon = 1e-12);
        let end = traj.setpoint(1.2);
        assert_relative_eq!(end.pose.position, b.position, epsilon = 1e-15);
        assert_eq!(end.twist, Twist::zero());
        assert_eq!(traj.settle_time(), 1.5);
    }

    #[test]
    fn timing_percentiles() {
        let d: Vec<Duration> = (1..=100).map(|k| Duration::from_micros(k)).collect();
        let s = TimingStats::from_durations(&d);
        assert_eq!(s.ticks, 100);
        assert_relative_eq!(s.mean_us, 50.5, epsilon = 1e-9);
        assert_relative_eq!(s.p99_us, 99.0, epsilon = 1e-9);
        assert_relative_eq!(s.max_us, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_values() {
        let e = TwinConfig::from_json(r#"{"rate_hz": 2000, "colour": 1}"#).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = TwinConfig::from_json(r#"{"rate_hz": 5000}"#).unwrap_err();
        assert!(e.to_string().contains("rate_hz"), "{e}");
        let e = TwinConfig::from_json(r#"{"gains": {"kp": [1,1,1,1,1,-1]}}"#).unwrap_err();
        assert!(e.to_string().contains("kp[5]"), "{e}");
        let text = serde_json::to_string(&TwinConfig::default()).unwrap();
        assert_eq!(TwinConfig::from_json(&text).unwrap(), TwinConfig::default());
    }

    #[test]
    fn csv_row_matches_header() {
        let r = TickRecord {
            tick: 0,
            time: 0.0,
            mode: 0,
            true_pose: Pose::identity(),
            true_twist: Twist::zero(),
            estimated_pose: Pose::identity(),
            estimated_twist: Twist::zero(),
            setpoint: Pose::identity(),
            valid_measurements: 6,
            estimator_iterations: 1,
            estimator_ok: true,
            estimator_residual: 0.0,
            failures: 0,
            safe_stop: false,
            commanded: Wrench::zero(),
            applied: Wrench::zero(),
            hand: Wrench::zero(),
            currents: Currents::zeros(),
            saturated: false,
            floor_contact: false,
            contacts: Vec::new(),
            tool_force: Vec3::zeros(),
            friction_ratio: 0.0,
            reaction_residual: 0.0,
            compute: Duration::ZERO,
        };
        assert_eq!(TickRecord::header().len(), r.values().len());
    }
}
