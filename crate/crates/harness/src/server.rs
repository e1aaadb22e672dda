//! WebSocket telemetry server. The simulation runs on its own thread at the
//! loop rate; clients talk to it only through bounded queues.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use maglev_core::control::Twin;
use maglev_core::magnetics::CoilArray;
use maglev_core::Pose;
use tokio::sync::broadcast;

use crate::protocol::{parse_command, ServerMessage, SimCommand};
use crate::service::SimulationService;
use crate::{HarnessConfig, HarnessError};

const COMMAND_QUEUE: usize = 256;
const FRAME_QUEUE: usize = 32;

#[derive(Clone)]
struct AppState {
    commands: SyncSender<SimCommand>,
    frames: broadcast::Sender<Arc<str>>,
    base_dir: PathBuf,
    hold: Pose,
}

/// A running server; dropping it stops the simulation thread.
pub struct RunningServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    sim: Option<std::thread::JoinHandle<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl RunningServer {
    pub async fn wait(mut self) {
        let task = std::mem::replace(&mut self.task, tokio::spawn(async {}));
        let _ = task.await;
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.task.abort();
        if let Some(h) = self.sim.take() {
            let _ = h.join();
        }
    }
}

fn simulate(
    mut service: SimulationService,
    commands: Receiver<SimCommand>,
    frames: broadcast::Sender<Arc<str>>,
    stop: Arc<AtomicBool>,
) {
    let period = Duration::from_secs_f64(service.twin.config.dt());
    let mut next = Instant::now();
    let mut failed = false;
    while !stop.load(Ordering::Relaxed) {
        while let Ok(c) = commands.try_recv() {
            service.submit(c);
        }
        if !failed {
            match service.step() {
                Ok(Some(frame)) => {
                    // no receivers is fine
                    let _ = frames.send(ServerMessage::Telemetry(frame).to_json().into());
                }
                Ok(None) => {}
                Err(e) => {
                    let _ = frames.send(
                        ServerMessage::error(format!("simulation halted: {e}"))
                            .to_json()
                            .into(),
                    );
                    failed = true;
                }
            }
        }
        next += period;
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
        } else if now - next > Duration::from_millis(100) {
            // fell far behind; drop the backlog instead of racing to catch up
            next = now;
        }
    }
}

/// Binds `addr` and starts the simulation and the WebSocket endpoint at
/// `/ws`.
pub async fn start(
    config: &HarnessConfig,
    addr: SocketAddr,
    array: Option<Arc<CoilArray>>,
) -> Result<RunningServer, HarnessError> {
    let twin = match array {
        Some(a) => Twin::with_array(config.twin.clone(), a, config.seed)?,
        None => Twin::new(config.twin.clone(), config.seed)?,
    };
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| HarnessError::io(std::path::Path::new(&addr.to_string()), e))?;
    let addr = listener
        .local_addr()
        .map_err(|e| HarnessError::io(std::path::Path::new("<listener>"), e))?;

    let (cmd_tx, cmd_rx) = sync_channel(COMMAND_QUEUE);
    let (frame_tx, _) = broadcast::channel(FRAME_QUEUE);
    let stop = Arc::new(AtomicBool::new(false));
    let state = AppState {
        commands: cmd_tx,
        frames: frame_tx.clone(),
        base_dir: config.base_dir.clone(),
        hold: config.twin.initial_pose,
    };
    let sim = {
        let stop = stop.clone();
        let service = SimulationService::new(twin);
        std::thread::Builder::new()
            .name("maglev-sim".into())
            .spawn(move || simulate(service, cmd_rx, frame_tx, stop))
            .map_err(|e| HarnessError::io(std::path::Path::new("<sim thread>"), e))?
    };
    let app = Router::new()
        .route("/ws", get(upgrade))
        .route(
            "/",
            get(|| async { "maglev telemetry: connect a WebSocket to /ws\n" }),
        )
        .with_state(state);
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(RunningServer {
        addr,
        stop,
        sim: Some(sim),
        task,
    })
}

/// Runs until the process is interrupted.
pub async fn serve(config: &HarnessConfig, port: u16) -> Result<(), HarnessError> {
    let server = start(config, SocketAddr::from(([127, 0, 0, 1], port)), None).await?;
    eprintln!("listening on ws://{}/ws", server.addr);
    server.wait().await;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, state))
}

async fn client(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let mut frames = state.frames.subscribe();
    loop {
        let reply = tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => match parse_command(&text, &state.base_dir, &state.hold) {
                    Ok(cmd) => match state.commands.try_send(cmd) {
                        Ok(()) => None,
                        Err(TrySendError::Full(_)) => Some(ServerMessage::error("command queue full").to_json()),
                        Err(TrySendError::Disconnected(_)) => break,
                    },
                    Err(reason) => Some(ServerMessage::error(reason).to_json()),
                },
                Some(Ok(Message::Binary(_))) => Some(ServerMessage::error("binary frames are not supported").to_json()),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => None,
            },
            frame = frames.recv() => match frame {
                Ok(text) => Some(text.to_string()),
                // a slow client loses frames; the loop never waits for it
                Err(broadcast::error::RecvError::Lagged(_)) => None,
                Err(broadcast::error::RecvError::Closed) => break,
            },
        };
        if let Some(text) = reply {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    }
}
