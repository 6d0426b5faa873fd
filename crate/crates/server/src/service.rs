//! The network service: listeners, per-connection sessions and the single
//! core task that owns plant, observer, controller and state machine.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use teleop_core::controller::{ControlAction, MoveController};
use teleop_core::observer::{format_command_line, parse_sensor_line, ObserverError, ObserverState, STALE_PERIODS};
use teleop_core::{ModuleSpec, SystemConfig};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::MissedTickBehavior;

use crate::link::{PlantHandle, PlantSource};
use crate::protocol::{decode, encode, Message, MAX_LINE_BYTES};
use crate::session::{ControlEvent, Effect, Fsm, Reaction, Session};
use crate::snapshot::{state_message, Snapshot};
use crate::transport::{spawn_line_pumps, spawn_ws_pumps, Incoming};

pub const DEFAULT_PORT: u16 = 9000;
pub const DEFAULT_WS_PORT: u16 = 9001;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub config: SystemConfig,
    pub tcp_addr: SocketAddr,
    /// WebSocket bridge; `None` disables it.
    pub ws_addr: Option<SocketAddr>,
    pub plant: PlantSource,
}

type ConnId = u64;

enum Request {
    Connect {
        id: ConnId,
        replies: mpsc::UnboundedSender<Message>,
        subscribed: oneshot::Sender<broadcast::Receiver<Arc<Snapshot>>>,
    },
    Message {
        id: ConnId,
        msg: Message,
    },
    Disconnect {
        id: ConnId,
    },
}

struct Core {
    config: SystemConfig,
    session: Session,
    plant: PlantHandle,
    observer: ObserverState,
    mover: Option<MoveController>,
    authority: Option<ConnId>,
    clients: HashMap<ConnId, mpsc::UnboundedSender<Message>>,
    states: broadcast::Sender<Arc<Snapshot>>,
    t_ms: u64,
    ticks: u64,
    last_frame_at: Option<u64>,
}

impl Core {
    fn period_ms(&self) -> u64 {
        self.config.control.period_ms
    }

    fn specs(&self) -> &[ModuleSpec] {
        self.session.specs()
    }

    fn tick(&mut self) {
        let dt = if self.ticks == 0 { 0 } else { self.period_ms() };
        self.ticks += 1;
        self.t_ms += dt;
        for line in self.plant.poll(dt) {
            self.ingest_line(&line);
        }

        if self.mover.is_some() {
            self.step_controller();
        }
        self.publish();
    }

    fn publish(&mut self) {
        let snap = Arc::new(self.snapshot());
        let _ = self.states.send(snap);
    }

    fn ingest_line(&mut self, line: &str) {
        let frame = match parse_sensor_line(line) {
            Ok(f) => f,
            Err(e) => {
                log::debug!("dropping sensor line: {e}");
                return;
            }
        };
        let result = match self.observer.ingest(&frame) {
            // A restarted plant starts its clock again.
            Err(ObserverError::NonMonotonic { .. }) => {
                self.observer = ObserverState::with_filter(self.specs().to_vec(), self.config.filter);
                self.observer.ingest(&frame)
            }
            other => other,
        };
        match result {
            Ok(_) => self.last_frame_at = Some(self.t_ms),
            Err(e) => log::debug!("frame rejected: {e}"),
        }
    }

    fn is_stale(&self) -> bool {
        self.last_frame_at
            .is_none_or(|t| self.t_ms - t > STALE_PERIODS * self.period_ms())
    }

    fn step_controller(&mut self) {
        let stale = self.is_stale();
        let period = self.period_ms() as f64;
        let pose = if stale { None } else { self.observer.estimate().ok().cloned() };
        let readings = self.observer.filtered_readings().map(<[_]>::to_vec);
        let snapshot = pose.as_ref().zip(readings.as_deref());
        let Some(mover) = self.mover.as_mut() else {
            return;
        };
        let event = match mover.tick(self.t_ms, period, snapshot) {
            ControlAction::Command(lengths) => {
                self.plant.command(&format_command_line(&lengths));
                return;
            }
            ControlAction::Hold => return,
            ControlAction::Converged { error_mm } => ControlEvent::Converged { error_mm },
            ControlAction::Timeout { error_mm } => ControlEvent::Timeout { error_mm },
        };
        log::info!("move finished: {event:?}");
        self.mover = None;
        let reaction = self.session.handle_event(event);
        if let Some(id) = self.authority {
            self.send_all(id, reaction.replies);
        }
    }

    fn snapshot(&mut self) -> Snapshot {
        let stale = self.is_stale();
        Snapshot {
            t_ms: self.t_ms,
            fsm: self.session.fsm(),
            specs: self.specs().to_vec(),
            readings: self.observer.filtered_readings().map(<[_]>::to_vec),
            pose: self.observer.estimate().ok().cloned(),
            stale,
        }
    }

    fn send_all(&self, id: ConnId, msgs: Vec<Message>) {
        if let Some(tx) = self.clients.get(&id) {
            for m in msgs {
                let _ = tx.send(m);
            }
        }
    }

    fn handle(&mut self, req: Request) {
        match req {
            Request::Connect {
                id,
                replies,
                subscribed,
            } => {
                self.clients.insert(id, replies);
                let _ = subscribed.send(self.states.subscribe());
            }
            Request::Message { id, msg } => {
                let reaction = self.authorize(id, &msg);
                self.apply(reaction.effect.clone());
                self.send_all(id, reaction.replies);
            }
            Request::Disconnect { id } => {
                self.clients.remove(&id);
                if self.authority == Some(id) {
                    log::info!("controlling client {id} left");
                    self.authority = None;
                    let reaction = self.session.handle_disconnect();
                    self.apply(reaction.effect);
                }
            }
        }
    }

    /// Single control authority: the first client to lock owns every
    /// state-changing message until it unlocks or leaves.
    fn authorize(&mut self, id: ConnId, msg: &Message) -> Reaction {
        let fsm = self.session.fsm();
        let held_by_other = self.authority.is_some_and(|a| a != id);
        let denied = || Reaction {
            replies: vec![Message::error("not_authorized", "another client holds control")],
            effect: None,
        };
        match msg {
            Message::Hello { .. } => self.session.handle_message(msg),
            Message::Config { .. } | Message::Lock if held_by_other => denied(),
            // Control orphaned by a disconnect can be claimed again.
            Message::Lock if self.authority.is_none() && fsm >= Fsm::Locked => {
                self.authority = Some(id);
                Reaction {
                    replies: vec![Message::ack("lock")],
                    effect: None,
                }
            }
            Message::Unlock | Message::Target { .. } | Message::Move | Message::Stop
                if fsm >= Fsm::Locked && self.authority != Some(id) =>
            {
                denied()
            }
            _ => {
                let reaction = self.session.handle_message(msg);
                match (fsm, self.session.fsm()) {
                    (Fsm::Configured, Fsm::Locked) => self.authority = Some(id),
                    (Fsm::Locked, Fsm::Configured) => self.authority = None,
                    _ => {}
                }
                reaction
            }
        }
    }

    fn apply(&mut self, effect: Option<Effect>) {
        match effect {
            None => {}
            Some(Effect::Reconfigure(specs)) => {
                self.mover = None;
                self.plant.reconfigure(&self.config, &specs);
                self.observer = ObserverState::with_filter(specs, self.config.filter);
                self.last_frame_at = None;
            }
            Some(Effect::StartMove(target)) => {
                self.mover = Some(MoveController::new(
                    self.specs().to_vec(),
                    target,
                    self.config.control.gains(),
                    self.config.control.control_state(),
                ));
            }
            Some(Effect::StopMove) => self.mover = None,
        }
    }
}

async fn run_core(
    mut core: Core,
    mut requests: mpsc::UnboundedReceiver<Request>,
    mut shutdown: oneshot::Receiver<()>,
) {
    let mut ticker = tokio::time::interval(Duration::from_millis(core.period_ms()));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = ticker.tick() => core.tick(),
            Some(req) = requests.recv() => core.handle(req),
            _ = &mut shutdown => break,
        }
    }
    // Final state for everyone; dropping the senders then closes every
    // connection once its queue is flushed.
    core.publish();
}

async fn run_connection(
    id: ConnId,
    core: mpsc::UnboundedSender<Request>,
    mut incoming: mpsc::Receiver<Incoming>,
    out: mpsc::UnboundedSender<String>,
) {
    let (reply_tx, mut replies) = mpsc::unbounded_channel();
    let (sub_tx, sub_rx) = oneshot::channel();
    let connect = Request::Connect {
        id,
        replies: reply_tx,
        subscribed: sub_tx,
    };
    if core.send(connect).is_err() {
        return;
    }
    let Ok(mut states) = sub_rx.await else {
        return;
    };
    let mut seq = 0u64;
    loop {
        tokio::select! {
            item = incoming.recv() => {
                let line = match item {
                    None => break,
                    Some(Incoming::TooLong) => {
                        let err = Message::error("bad_message", format!("line exceeds {MAX_LINE_BYTES} bytes"));
                        let _ = out.send(encode(&err));
                        continue;
                    }
                    Some(Incoming::Line(l)) if l.trim().is_empty() => continue,
                    Some(Incoming::Line(l)) => l,
                };
                match decode(&line) {
                    Ok(msg) => {
                        if core.send(Request::Message { id, msg }).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = out.send(encode(&e.to_message()));
                    }
                }
            }
            Some(reply) = replies.recv() => {
                let _ = out.send(encode(&reply));
            }
            state = states.recv() => match state {
                Ok(snap) => {
                    seq += 1;
                    let _ = out.send(encode(&state_message(&snap, seq)));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("client {id} skipped {n} states"),
                Err(broadcast::error::RecvError::Closed) => {
                    while let Ok(reply) = replies.try_recv() {
                        let _ = out.send(encode(&reply));
                    }
                    return;
                }
            },
        }
    }
    let _ = core.send(Request::Disconnect { id });
}

/// A running service. Dropping it without [`Server::shutdown`] aborts the
/// listeners but leaves connections to the runtime.
pub struct Server {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl Server {
    pub async fn start(opts: ServeOptions) -> anyhow::Result<Self> {
        opts.config.validate()?;
        let tcp = TcpListener::bind(opts.tcp_addr)
            .await
            .with_context(|| format!("binding {}", opts.tcp_addr))?;
        let ws = match opts.ws_addr {
            Some(addr) => Some(
                TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?,
            ),
            None => None,
        };
        let plant = PlantHandle::connect(&opts.plant, &opts.config).await?;
        let tcp_addr = tcp.local_addr()?;
        let ws_addr = ws.as_ref().map(|l| l.local_addr()).transpose()?;

        let (states, _) = broadcast::channel(64);
        let core = Core {
            session: Session::new(opts.config.modules.clone()),
            observer: ObserverState::with_filter(opts.config.modules.clone(), opts.config.filter),
            config: opts.config,
            plant,
            mover: None,
            authority: None,
            clients: HashMap::new(),
            states,
            t_ms: 0,
            ticks: 0,
            last_frame_at: None,
        };
        let (req_tx, req_rx) = mpsc::unbounded_channel();
        let (stop_tx, stop_rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            let mut connections = JoinSet::new();
            let mut accept = JoinSet::new();
            let (conn_tx, mut conn_rx) = mpsc::unbounded_channel::<JoinHandle<()>>();
            accept.spawn(accept_tcp(tcp, req_tx.clone(), conn_tx.clone()));
            if let Some(ws) = ws {
                accept.spawn(accept_ws(ws, req_tx.clone(), conn_tx.clone()));
            }
            drop((req_tx, conn_tx));
            let core = tokio::spawn(run_core(core, req_rx, stop_rx));
            let _ = core.await;
            accept.abort_all();
            while let Ok(writer) = conn_rx.try_recv() {
                connections.spawn(writer);
            }
            let flush = async { while connections.join_next().await.is_some() {} };
            let _ = tokio::time::timeout(Duration::from_secs(2), flush).await;
        });
        log::info!("listening on {tcp_addr} (tcp){}", match ws_addr {
            Some(a) => format!(" and {a} (websocket)"),
            None => String::new(),
        });
        Ok(Self {
            tcp_addr,
            ws_addr,
            shutdown: Some(stop_tx),
            task,
        })
    }

    /// Stops the core, flushes a final state message to every client and
    /// closes the connections.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

/// Runs until `signal` resolves.
pub async fn serve(opts: ServeOptions, signal: impl std::future::Future<Output = ()>) -> anyhow::Result<()> {
    let server = Server::start(opts).await?;
    signal.await;
    log::info!("shutting down");
    server.shutdown().await;
    Ok(())
}

static NEXT_ID: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

fn next_id() -> ConnId {
    NEXT_ID.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
}

async fn accept_tcp(
    listener: TcpListener,
    core: mpsc::UnboundedSender<Request>,
    writers: mpsc::UnboundedSender<JoinHandle<()>>,
) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = next_id();
        log::info!("client {id} connected from {peer}");
        let (incoming, out, writer) = spawn_line_pumps(stream);
        let _ = writers.send(writer);
        tokio::spawn(run_connection(id, core.clone(), incoming, out));
    }
}

async fn accept_ws(
    listener: TcpListener,
    core: mpsc::UnboundedSender<Request>,
    writers: mpsc::UnboundedSender<JoinHandle<()>>,
) {
    loop {
        let (stream, peer) = match listener.accept().await {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let core = core.clone();
        let writers = writers.clone();
        tokio::spawn(async move {
            let (incoming, out, writer) = match spawn_ws_pumps(stream).await {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("websocket handshake with {peer} failed: {e}");
                    return;
                }
            };
            let id = next_id();
            log::info!("client {id} connected from {peer} (websocket)");
            let _ = writers.send(writer);
            run_connection(id, core, incoming, out).await;
        });
    }
}

/// Connects to a TCP endpoint; convenience for tools and tests.
pub async fn connect(addr: SocketAddr) -> std::io::Result<TcpStream> {
    let s = TcpStream::connect(addr).await?;
    s.set_nodelay(true)?;
    Ok(s)
}
