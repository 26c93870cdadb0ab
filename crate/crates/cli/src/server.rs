//! Control service. The simulation runs on its own thread and is the only
//! owner of the world; clients talk to it through a command queue and an
//! event broadcast.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ble_lab::config::ScenarioConfig;
use ble_lab::control::{Command, ServerEvent};
use ble_lab::sim::World;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, oneshot};

const TICK: Duration = Duration::from_millis(5);
const BROADCAST_DEPTH: usize = 4096;

struct Request {
    command: Command,
    reply: Option<oneshot::Sender<Vec<ServerEvent>>>,
}

/// Every event published so far, plus the live feed. A new subscriber gets
/// the backlog and the feed under one lock, so nothing is missed or doubled.
struct Hub {
    history: Mutex<Vec<Arc<str>>>,
    feed: broadcast::Sender<Arc<str>>,
}

impl Hub {
    fn new() -> Hub {
        Hub {
            history: Mutex::new(Vec::new()),
            feed: broadcast::channel(BROADCAST_DEPTH).0,
        }
    }

    fn publish(&self, events: &[ServerEvent]) {
        if events.is_empty() {
            return;
        }
        let mut history = self.history.lock().expect("hub lock");
        for e in events {
            let text: Arc<str> = serde_json::to_string(e).expect("events serialize").into();
            history.push(text.clone());
            let _ = self.feed.send(text);
        }
    }

    fn subscribe(&self) -> (Vec<Arc<str>>, broadcast::Receiver<Arc<str>>) {
        let history = self.history.lock().expect("hub lock");
        (history.clone(), self.feed.subscribe())
    }
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Request>,
    hub: Arc<Hub>,
}

/// Advances the world in paced real time: `time_scale` virtual ms per wall
/// ms. Commands apply at the current virtual time. Returns when every
/// command sender is gone.
fn simulation_loop(mut world: World, time_scale: f64, commands: mpsc::Receiver<Request>, hub: Arc<Hub>) {
    let start = Instant::now();
    loop {
        let target = (start.elapsed().as_secs_f64() * 1000.0 * time_scale) as u64;
        world.run_until(target);
        hub.publish(&world.drain_outbox());
        match commands.recv_timeout(TICK) {
            Ok(req) => {
                let _ = world.apply(req.command);
                let events = world.drain_outbox();
                hub.publish(&events);
                if let Some(reply) = req.reply {
                    let _ = reply.send(events);
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        }
    }
}

pub fn router(config: ScenarioConfig, time_scale: f64) -> Result<Router, String> {
    if !(time_scale.is_finite() && time_scale > 0.0) {
        return Err(format!("time scale must be positive, got {time_scale}"));
    }
    let world = World::new(config).map_err(|e| e.to_string())?;
    let (tx, rx) = mpsc::channel();
    let hub = Arc::new(Hub::new());
    let loop_hub = hub.clone();
    thread::Builder::new()
        .name("simulation".into())
        .spawn(move || simulation_loop(world, time_scale, rx, loop_hub))
        .map_err(|e| e.to_string())?;
    let state = AppState { commands: tx, hub };
    Ok(Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/api/command", post(post_command))
        .route("/api/devices", get(get_devices))
        .with_state(state))
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, config: ScenarioConfig, time_scale: f64) -> Result<(), String> {
    let app = router(config, time_scale)?;
    axum::serve(listener, app).await.map_err(|e| e.to_string())
}

async fn submit(state: &AppState, command: Command) -> Result<Vec<ServerEvent>, String> {
    let (tx, rx) = oneshot::channel();
    state
        .commands
        .send(Request {
            command,
            reply: Some(tx),
        })
        .map_err(|_| "simulation stopped".to_string())?;
    rx.await.map_err(|_| "simulation stopped".to_string())
}

fn error_event(command: Option<&str>, message: String) -> ServerEvent {
    ServerEvent::Error {
        command: command.map(str::to_string),
        message,
    }
}

fn reply(events: Vec<ServerEvent>) -> Response {
    let status = match events.last() {
        Some(ServerEvent::Error { .. }) => StatusCode::BAD_REQUEST,
        _ => StatusCode::OK,
    };
    (status, Json(events)).into_response()
}

async fn post_command(State(state): State<AppState>, body: String) -> Response {
    let command = match serde_json::from_str::<Command>(&body) {
        Ok(c) => c,
        Err(e) => return reply(vec![error_event(None, e.to_string())]),
    };
    match submit(&state, command).await {
        Ok(events) => reply(events),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(vec![error_event(None, e)])).into_response(),
    }
}

async fn get_devices(State(state): State<AppState>) -> Response {
    match submit(&state, Command::ListDevices {}).await {
        Ok(events) => reply(events),
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(vec![error_event(None, e)])).into_response(),
    }
}

async fn ws_upgrade(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| client(socket, state))
}

/// Sends the backlog, then relays the feed while accepting commands. A
/// malformed message gets an error back on this socket only.
async fn client(mut socket: WebSocket, state: AppState) {
    let (backlog, mut feed) = state.hub.subscribe();
    for text in backlog {
        if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                match serde_json::from_str::<Command>(text.as_str()) {
                    Ok(command) => {
                        if state.commands.send(Request { command, reply: None }).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let msg = serde_json::to_string(&error_event(None, e.to_string())).expect("serializes");
                        if socket.send(Message::Text(msg.into())).await.is_err() {
                            return;
                        }
                    }
                }
            }
            event = feed.recv() => match event {
                Ok(text) => {
                    if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    let msg = serde_json::to_string(&error_event(None, format!("client lagged; {n} events skipped"))).expect("serializes");
                    if socket.send(Message::Text(msg.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
        }
    }
}

#[cfg(test)]
mod tests;
