//! WebSocket wire format. JSON text frames, SI units, poses as
//! `[x, y, z, qw, qx, qy, qz]`.

use std::path::Path;

use maglev_core::control::{Command, ControlMode, ControllerGains, TickRecord, Trajectory};
use maglev_core::haptics::Scene;
use maglev_core::Pose;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    MotionControl,
    HapticInteraction,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SetHandTarget {
        pose: [f64; 7],
    },
    SetHandEnabled {
        enabled: bool,
    },
    /// Motion control holds `pose`, or the configured start pose if absent.
    SetMode {
        mode: ModeName,
        #[serde(default)]
        pose: Option<[f64; 7]>,
    },
    /// Exactly one of `path` (relative to the config file) or `scene`.
    LoadScene {
        #[serde(default)]
        path: Option<String>,
        #[serde(default)]
        scene: Option<Scene>,
    },
    SetGains {
        kp: [f64; 6],
        kd: [f64; 6],
    },
    Pause {},
    Resume {},
    /// Clears a safe-stop.
    Reset {},
}

/// What the simulation thread applies at the next tick boundary.
#[derive(Clone, Debug, PartialEq)]
pub enum SimCommand {
    Twin(Command),
    Pause,
    Resume,
}

fn pose_from(a: &[f64; 7]) -> Result<Pose, String> {
    Pose::from_array(a).ok_or_else(|| "pose must be finite with a non-zero quaternion".to_string())
}

impl ClientMessage {
    /// Checks the message and turns it into a simulation command. Scene
    /// files are read here so the simulation thread never touches I/O.
    pub fn resolve(self, base_dir: &Path, hold: &Pose) -> Result<SimCommand, String> {
        Ok(match self {
            ClientMessage::SetHandTarget { pose } => SimCommand::Twin(Command::SetHandTarget {
                pose: pose_from(&pose)?,
            }),
            ClientMessage::SetHandEnabled { enabled } => {
                SimCommand::Twin(Command::SetHandEnabled { enabled })
            }
            ClientMessage::SetMode { mode, pose } => {
                let mode = match mode {
                    ModeName::HapticInteraction => ControlMode::HapticInteraction,
                    ModeName::MotionControl => ControlMode::MotionControl {
                        trajectory: Trajectory::Hold {
                            pose: pose.as_ref().map(pose_from).transpose()?.unwrap_or(*hold),
                        },
                    },
                };
                SimCommand::Twin(Command::SetMode { mode })
            }
            ClientMessage::LoadScene { path, scene } => {
                let scene = match (path, scene) {
                    (Some(p), None) => {
                        crate::config::load_scene(&base_dir.join(p)).map_err(|e| e.to_string())?
                    }
                    (None, Some(s)) => {
                        s.validate().map_err(|e| e.to_string())?;
                        s
                    }
                    _ => return Err("load_scene needs exactly one of path or scene".into()),
                };
                SimCommand::Twin(Command::SetScene { scene })
            }
            ClientMessage::SetGains { kp, kd } => {
                let gains = ControllerGains { kp, kd };
                gains.validate()?;
                SimCommand::Twin(Command::SetGains { gains })
            }
            ClientMessage::Pause {} => SimCommand::Pause,
            ClientMessage::Resume {} => SimCommand::Resume,
            ClientMessage::Reset {} => SimCommand::Twin(Command::Reset),
        })
    }
}

/// Parses one text frame into a simulation command, or the reason it was
/// rejected.
pub fn parse_command(text: &str, base_dir: &Path, hold: &Pose) -> Result<SimCommand, String> {
    let msg: ClientMessage = serde_json::from_str(text).map_err(|e| e.to_string())?;
    msg.resolve(base_dir, hold)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContactFrame {
    pub object: String,
    pub depth: f64,
    pub normal: [f64; 3],
    pub point: [f64; 3],
    pub volume: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Telemetry {
    pub seq: u64,
    pub tick: u64,
    pub t: f64,
    pub pose: [f64; 7],
    pub est_pose: [f64; 7],
    /// Magnetic wrench applied to the handle.
    pub wrench: [f64; 6],
    pub currents: [f64; 12],
    pub contacts: Vec<ContactFrame>,
    pub mode: ModeName,
    pub saturated: bool,
    pub safe_stop: bool,
    pub hand_target: Option<[f64; 7]>,
    /// Commands applied so far; a command's effect is visible from the
    /// first frame whose count includes it.
    pub commands_applied: u64,
}

impl Telemetry {
    pub fn from_record(
        seq: u64,
        r: &TickRecord,
        scene: &Scene,
        hand_target: Option<Pose>,
        commands_applied: u64,
    ) -> Self {
        let v3 = |v: &maglev_core::Vec3| [v.x, v.y, v.z];
        let mut currents = [0.0; 12];
        currents.copy_from_slice(r.currents.as_slice());
        Self {
            seq,
            tick: r.tick,
            t: r.time,
            pose: r.true_pose.to_array(),
            est_pose: r.estimated_pose.to_array(),
            wrench: r.applied.to_array(),
            currents,
            contacts: r
                .contacts
                .iter()
                .map(|c| ContactFrame {
                    object: scene
                        .objects
                        .get(c.object)
                        .map_or_else(String::new, |o| o.name.clone()),
                    depth: c.depth,
                    normal: v3(&c.normal),
                    point: v3(&c.point),
                    volume: c.volume,
                })
                .collect(),
            mode: if r.mode == 0 {
                ModeName::MotionControl
            } else {
                ModeName::HapticInteraction
            },
            saturated: r.saturated,
            safe_stop: r.safe_stop,
            hand_target: hand_target.map(|p| p.to_array()),
            commands_applied,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Telemetry(Telemetry),
    Error { reason: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn error(reason: impl Into<String>) -> Self {
        ServerMessage::Error {
            reason: reason.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<SimCommand, String> {
        parse_command(
            text,
            Path::new("."),
            &Pose::from_translation(0.0, 0.0, 0.02),
        )
    }

    #[test]
    fn command_frames() {
        let c = parse(r#"{"type":"set_hand_target","pose":[0,0,0.02,1,0,0,0]}"#).unwrap();
        assert_eq!(
            c,
            SimCommand::Twin(Command::SetHandTarget {
                pose: Pose::from_translation(0.0, 0.0, 0.02)
            })
        );
        assert_eq!(parse(r#"{"type":"pause"}"#).unwrap(), SimCommand::Pause);
        assert!(matches!(
            parse(r#"{"type":"set_mode","mode":"haptic_interaction"}"#).unwrap(),
            SimCommand::Twin(Command::SetMode {
                mode: ControlMode::HapticInteraction
            })
        ));
        assert!(parse(r#"{"type":"set_gains","kp":[1,1,1,1,1,1],"kd":[0,0,0,0,0,0]}"#).is_ok());
    }

    #[test]
    fn rejected_frames_give_reasons() {
        for bad in [
            "not json",
            r#"{"type":"warp"}"#,
            r#"{"type":"set_hand_target","pose":[0,0,0]}"#,
            r#"{"type":"set_hand_target","pose":[0,0,0,0,0,0,0]}"#,
            r#"{"type":"set_gains","kp":[1,1,1,1,1,-1],"kd":[0,0,0,0,0,0]}"#,
            r#"{"type":"load_scene"}"#,
            r#"{"type":"load_scene","path":"missing.json"}"#,
            r#"{"type":"pause","extra":1}"#,
        ] {
            let reason = parse(bad).unwrap_err();
            assert!(!reason.is_empty(), "{bad}");
        }
    }

    #[test]
    fn error_frame_shape() {
        let v: serde_json::Value =
            serde_json::from_str(&ServerMessage::error("bad").to_json()).unwrap();
        assert_eq!(v, serde_json::json!({"type": "error", "reason": "bad"}));
    }
}
