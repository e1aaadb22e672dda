//! Scripted runs: a mode, timed commands and a duration, logged one CSV row
//! per tick with a summary at the end.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use maglev_core::allocation::{hover_wrench, Allocator};
use maglev_core::control::{
    Command, ControlMode, TickRecord, TimingStats, Trajectory, Twin, Waypoint,
};
use maglev_core::haptics::Scene;
use maglev_core::magnetics::{ActuationModel, CoilArray};
use maglev_core::plant::{HandModel, GRAVITY};
use maglev_core::{Pose, Vec3, Wrench};
use serde::{Deserialize, Serialize};

use crate::{HarnessConfig, HarnessError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub at: f64,
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default)]
    pub name: String,
    pub duration: f64,
    /// Replaces the config's starting mode.
    #[serde(default)]
    pub mode: Option<ControlMode>,
    #[serde(default)]
    pub initial_pose: Option<Pose>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    /// Fault injection: relative error of the cogging compensation.
    #[serde(default)]
    pub cogging_gain_error: Option<f64>,
    /// Overrides the sensor image noise (0 for noise-free sensing).
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub scene: Option<Scene>,
    #[serde(default)]
    pub hand: Option<HandModel>,
    #[serde(default)]
    pub expect_safe_stop: bool,
    /// Position band for the settling time, m.
    #[serde(default = "default_band")]
    pub settle_band: f64,
}

fn default_band() -> f64 {
    1e-4
}

impl ScenarioScript {
    pub fn new(name: &str, duration: f64, mode: ControlMode) -> Self {
        Self {
            name: name.into(),
            duration,
            mode: Some(mode),
            initial_pose: None,
            events: Vec::new(),
            cogging_gain_error: None,
            noise_std: None,
            scene: None,
            hand: None,
            expect_safe_stop: false,
            settle_band: default_band(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(format!("scenario: {m}")));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be > 0");
        }
        if self
            .events
            .iter()
            .any(|e| !(e.at >= 0.0 && e.at <= self.duration))
        {
            return bad("event times must lie within [0, duration]");
        }
        if self.events.windows(2).any(|w| w[1].at < w[0].at) {
            return bad("events must be in time order");
        }
        if !(self.settle_band > 0.0) {
            return bad("settle_band must be > 0");
        }
        if let Some(ControlMode::MotionControl { trajectory }) = &self.mode {
            trajectory
                .validate()
                .map_err(|e| HarnessError::Invalid(format!("scenario: {e}")))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let script: Self =
            serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text))
                .map_err(|e| match e.inner().classify() {
                    serde_json::error::Category::Data => {
                        HarnessError::Invalid(format!("scenario.{}: {}", e.path(), e.inner()))
                    }
                    _ => HarnessError::parse(e.into_inner()),
                })?;
        script.validate()?;
        Ok(script)
    }

    /// A file path, or the name of a built-in scenario.
    pub fn resolve(name_or_path: &str) -> Result<Self, HarnessError> {
        let path = Path::new(name_or_path);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            return Self::from_json(&text).map_err(|e| e.in_file(path));
        }
        builtin(name_or_path)
            .ok_or_else(|| HarnessError::UnknownScenario(name_or_path.into(), BUILTINS.join(", ")))
    }
}

pub const BUILTINS: [&str; 6] = ["hover", "step", "sine", "tour", "blackout", "haptic"];

pub fn hover_pose() -> Pose {
    Pose::from_translation(0.0, 0.0, 0.02)
}

fn motion(trajectory: Trajectory) -> ControlMode {
    ControlMode::MotionControl { trajectory }
}

pub fn builtin(name: &str) -> Option<ScenarioScript> {
    let hover = hover_pose();
    Some(match name {
        "hover" => ScenarioScript::new("hover", 2.0, motion(Trajectory::Hold { pose: hover })),
        "step" => ScenarioScript::new(
            "step",
            10.0,
            motion(Trajectory::Step {
                from: hover,
                to: Pose::from_translation(0.0, 0.0, 0.025),
                at: 0.1,
            }),
        ),
        "sine" => ScenarioScript {
            noise_std: Some(0.0),
            ..ScenarioScript::new(
                "sine",
                1.0,
                motion(Trajectory::Sinusoid {
                    center: hover,
                    amplitude: Vec3::new(0.0, 0.0, 2e-5),
                    frequency: 200.0,
                }),
            )
        },
        "tour" => {
            let tour = workspace_tour();
            let duration = tour.settle_time() + 0.1;
            ScenarioScript::new("tour", duration, motion(tour))
        }
        "blackout" => ScenarioScript {
            events: vec![ScenarioEvent {
                at: 0.25,
                command: Command::InjectBlackout { ticks: 10 },
            }],
            expect_safe_stop: true,
            ..ScenarioScript::new("blackout", 0.5, motion(Trajectory::Hold { pose: hover }))
        },
        "haptic" => {
            let press = |x: f64| Pose::from_translation(x, 0.0, 0.0125);
            ScenarioScript {
                scene: Some(Scene::demo()),
                hand: Some(HandModel {
                    waypoints: vec![
                        (0.0, hover),
                        (0.3, press(-0.02)),
                        (1.3, press(0.01)),
                        (1.6, hover),
                    ],
                    enabled: true,
                    ..HandModel::default()
                }),
                ..ScenarioScript::new("haptic", 2.0, ControlMode::HapticInteraction)
            }
        }
        _ => return None,
    })
}

/// Waypoint tour over the servo workspace. Each target is approached from
/// the centre with a minimum-jerk move and then held.
pub fn workspace_tour() -> Trajectory {
    let start = hover_pose();
    let d = PI / 180.0;
    let targets = [
        Pose::from_translation(0.0, 0.0, 0.010),
        Pose::from_translation(0.0, 0.0, 0.040),
        Pose::from_translation(0.04, 0.0, 0.02),
        Pose::from_translation(-0.04, 0.0, 0.02),
        Pose::from_translation(0.0, 0.04, 0.02),
        Pose::from_translation(0.0, -0.04, 0.02),
        Pose::from_xyz_rpy(0.0, 0.0, 0.02, 0.0, 0.0, 45.0 * d),
        Pose::from_xyz_rpy(0.0, 0.0, 0.02, 0.0, 0.0, -45.0 * d),
        // tilts sit higher so the lower magnet clears the screen
        Pose::from_xyz_rpy(0.0, 0.0, 0.03, 30.0 * d, 0.0, 0.0),
        Pose::from_xyz_rpy(0.0, 0.0, 0.03, -30.0 * d, 0.0, 0.0),
        Pose::from_xyz_rpy(0.0, 0.0, 0.03, 0.0, 30.0 * d, 0.0),
        Pose::from_xyz_rpy(0.0, 0.0, 0.03, 0.0, -30.0 * d, 0.0),
    ];
    let mut points = Vec::new();
    for target in targets {
        points.push(Waypoint {
            pose: start,
            duration: 0.3,
            hold: 0.1,
        });
        points.push(Waypoint {
            pose: target,
            duration: 0.4,
            hold: 0.4,
        });
    }
    points.push(Waypoint {
        pose: start,
        duration: 0.3,
        hold: 0.2,
    });
    Trajectory::Waypoints { start, points }
}

/// Capability beyond hover at one pose, N.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CapabilitySnapshot {
    pub time: f64,
    pub pose: [f64; 7],
    pub plus_z: f64,
    pub plus_x: f64,
    pub minus_x: f64,
    pub plus_y: f64,
    pub minus_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryReport {
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub rate_hz: f64,
    pub duration: f64,
    /// From the last reference change until the position error stays
    /// within the band; absent when the reference never settles or the
    /// handle does not.
    pub settling_time: Option<f64>,
    pub max_error: f64,
    pub rms_error: f64,
    pub final_error: f64,
    pub max_rotation_error_deg: f64,
    pub saturation_fraction: f64,
    pub safe_stop: bool,
    pub safe_stop_time: Option<f64>,
    pub expected_safe_stop: bool,
    pub estimator_failures: u64,
    pub max_estimator_iterations: usize,
    pub max_contacts: usize,
    pub capability: Vec<CapabilitySnapshot>,
    pub timing: TimingStats,
}

impl SummaryReport {
    /// Whether the run ended as the script expected.
    pub fn ok(&self) -> bool {
        self.safe_stop == self.expected_safe_stop
    }
}

pub fn capability_snapshot(twin: &Twin, pose: &Pose) -> Option<CapabilitySnapshot> {
    let model = ActuationModel::at_pose(
        twin.array(),
        pose,
        &twin.handle.magnets,
        twin.config.control_field_source,
    )
    .ok()?;
    let allocator = Allocator::new(twin.config.allocator.clone());
    let bias = hover_wrench(&model, twin.handle.mass.mass, GRAVITY);
    let cap = |f: Vec3| allocator.capability(&model, &Wrench::from_force(f), &bias);
    Some(CapabilitySnapshot {
        time: twin.time(),
        pose: pose.to_array(),
        plus_z: cap(Vec3::z()),
        plus_x: cap(Vec3::x()),
        minus_x: cap(-Vec3::x()),
        plus_y: cap(Vec3::y()),
        minus_y: cap(-Vec3::y()),
    })
}

/// Builds the twin a script runs on, with the script's overrides applied.
pub fn prepare_twin(
    config: &HarnessConfig,
    script: &ScenarioScript,
    array: Option<Arc<CoilArray>>,
) -> Result<Twin, HarnessError> {
    script.validate()?;
    let mut c = config.twin.clone();
    if let Some(mode) = &script.mode {
        c.mode = mode.clone();
    }
    if let Some(p) = script.initial_pose {
        c.initial_pose = p;
    } else if let ControlMode::MotionControl { trajectory } = &c.mode {
        c.initial_pose = trajectory.setpoint(0.0).pose;
    }
    if let Some(e) = script.cogging_gain_error {
        c.control.cogging_gain_error = e;
    }
    if let Some(n) = script.noise_std {
        c.sensors.noise_std = n;
    }
    if let Some(s) = &script.scene {
        c.scene = s.clone();
    }
    if let Some(h) = &script.hand {
        c.hand = h.clone();
    }
    let twin = match array {
        Some(a) => Twin::with_array(c, a, config.seed)?,
        None => Twin::new(c, config.seed)?,
    };
    Ok(twin)
}

/// Runs the script, streaming one CSV row per tick to `out`. A record
/// callback sees every tick (used by tests and the acceptance runner).
pub fn run_to_writer<W: Write>(
    twin: &mut Twin,
    script: &ScenarioScript,
    seed: u64,
    out: W,
    mut on_record: impl FnMut(&TickRecord),
) -> Result<SummaryReport, HarnessError> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(TickRecord::header())?;

    let rate = twin.config.rate_hz;
    let ticks = (script.duration * rate).round() as u64;
    let settle_from = match &twin.mode {
        ControlMode::MotionControl { trajectory } => trajectory.settle_time(),
        ControlMode::HapticInteraction => f64::INFINITY,
    };
    let mut start_cap = Vec::new();
    start_cap.extend(capability_snapshot(twin, &twin.state.pose));

    let mut events = script.events.iter().peekable();
    let (mut max_err, mut sq_err, mut n_err, mut final_err, mut max_rot) =
        (0.0f64, 0.0, 0u64, 0.0, 0.0f64);
    let mut last_out: Option<f64> = None;
    let mut saturated = 0u64;
    let mut safe_stop_time = None;
    let mut failures = 0u64;
    let mut max_iters = 0;
    let mut max_contacts = 0;
    for _ in 0..ticks {
        while let Some(e) = events.next_if(|e| e.at <= twin.time() + 0.5 / rate) {
            twin.enqueue(e.command.clone());
        }
        let r = twin.tick()?;
        csv.write_record(r.values())?;
        on_record(&r);

        saturated += r.saturated as u64;
        failures += !r.estimator_ok as u64;
        max_iters = max_iters.max(r.estimator_iterations);
        max_contacts = max_contacts.max(r.contacts.len());
        if r.safe_stop && safe_stop_time.is_none() {
            safe_stop_time = Some(r.time);
        }
        if r.mode == 0 {
            let e = (r.true_pose.position - r.setpoint.position).norm();
            max_err = max_err.max(e);
            sq_err += e * e;
            n_err += 1;
            final_err = e;
            max_rot = max_rot.max(
                r.true_pose
                    .rotation_error_to(&r.setpoint)
                    .norm()
                    .to_degrees(),
            );
            if r.time >= settle_from && e > script.settle_band {
                last_out = Some(r.time);
            }
        }
    }
    csv.flush()
        .map_err(|e| HarnessError::io(Path::new("<csv>"), e))?;

    let settling_time = if settle_from.is_finite() && final_err <= script.settle_band && n_err > 0 {
        Some(last_out.map_or(0.0, |t| t + 1.0 / rate - settle_from))
    } else {
        None
    };
    start_cap.extend(capability_snapshot(twin, &twin.state.pose));
    Ok(SummaryReport {
        scenario: script.name.clone(),
        seed,
        ticks,
        rate_hz: rate,
        duration: script.duration,
        settling_time,
        max_error: max_err,
        rms_error: if n_err > 0 {
            (sq_err / n_err as f64).sqrt()
        } else {
            0.0
        },
        final_error: final_err,
        max_rotation_error_deg: max_rot,
        saturation_fraction: saturated as f64 / ticks.max(1) as f64,
        safe_stop: safe_stop_time.is_some(),
        safe_stop_time,
        expected_safe_stop: script.expect_safe_stop,
        estimator_failures: failures,
        max_estimator_iterations: max_iters,
        max_contacts,
        capability: start_cap,
        timing: twin.timing_stats(),
    })
}

/// Runs the script and writes `ticks.csv` and `summary.json` into `out_dir`.
pub fn run_scenario(
    config: &HarnessConfig,
    script: &ScenarioScript,
    out_dir: &Path,
    array: Option<Arc<CoilArray>>,
) -> Result<SummaryReport, HarnessError> {
    let mut twin = prepare_twin(config, script, array)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let csv_path = out_dir.join("ticks.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| HarnessError::io(&csv_path, e))?;
    let summary = run_to_writer(
        &mut twin,
        script,
        config.seed,
        std::io::BufWriter::new(file),
        |_| {},
    )?;
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, text + "\n").map_err(|e| HarnessError::io(&summary_path, e))?;
    Ok(summary)
}
