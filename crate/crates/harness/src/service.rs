//! The simulation side of the telemetry service, without any networking.
//! The server drives it from a dedicated thread; tests drive it directly.

use maglev_core::control::{ControlError, Twin};

use crate::protocol::{SimCommand, Telemetry};

pub const FRAME_RATE_HZ: f64 = 60.0;

pub struct SimulationService {
    pub twin: Twin,
    pending: Vec<SimCommand>,
    paused: bool,
    seq: u64,
    last_slot: Option<u64>,
    ticks: u64,
    commands_applied: u64,
}

impl SimulationService {
    pub fn new(twin: Twin) -> Self {
        Self {
            twin,
            pending: Vec::new(),
            paused: false,
            seq: 0,
            last_slot: None,
            ticks: 0,
            commands_applied: 0,
        }
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    /// Queues a command; it takes effect at the next tick boundary.
    pub fn submit(&mut self, command: SimCommand) {
        self.pending.push(command);
    }

    /// Runs one tick (unless paused) and returns a telemetry frame when the
    /// tick starts a new 1/60 s slot.
    pub fn step(&mut self) -> Result<Option<Telemetry>, ControlError> {
        for c in self.pending.drain(..) {
            match c {
                SimCommand::Pause => self.paused = true,
                SimCommand::Resume => self.paused = false,
                SimCommand::Twin(c) => self.twin.enqueue(c),
            }
            self.commands_applied += 1;
        }
        if self.paused {
            return Ok(None);
        }
        let record = self.twin.tick()?;
        let slot = (self.ticks as f64 * FRAME_RATE_HZ / self.twin.config.rate_hz).floor() as u64;
        self.ticks += 1;
        if self.last_slot == Some(slot) {
            return Ok(None);
        }
        self.last_slot = Some(slot);
        self.seq += 1;
        let t = self.twin.time();
        let hand_target = if self.twin.hand.enabled {
            self.twin.hand.target_at(t).map(|(p, _)| p)
        } else {
            None
        };
        Ok(Some(Telemetry::from_record(
            self.seq,
            &record,
            &self.twin.scene,
            hand_target,
            self.commands_applied,
        )))
    }
}
