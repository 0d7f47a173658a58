//! WebSocket server for the cockpit. The simulation thread owns the [`Sim`];
//! client threads only exchange serialized messages and parsed commands with
//! it through bounded queues.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use dronenav_core::nav::{Costmap, NavStatus, Path};
use tungstenite::{Error as WsError, Message as WsMessage};

use crate::bus::BoundedQueue;
use crate::protocol::{
    occupancy_cells, parse_command, DeltaEncoder, FrameEdge, GridInfo, Incoming, Message,
};
use crate::sim::Sim;

const CLIENT_QUEUE_DEPTH: usize = 256;
const COMMAND_QUEUE_DEPTH: usize = 1024;
const MAX_PARTICLES: usize = 300;
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// Pace the simulation to the wall clock; otherwise run flat out.
    pub realtime: bool,
    /// Upper bound on state broadcasts per wall-clock second.
    pub broadcast_hz: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            realtime: true,
            broadcast_hz: 20.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("cannot bind {addr}: {source}")]
pub struct BindError {
    pub addr: String,
    pub source: std::io::Error,
}

struct ClientSlot {
    id: u64,
    outbox: Arc<BoundedQueue<Arc<String>>>,
    closed: Arc<AtomicBool>,
    seen_drops: u64,
    greeted: bool,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    sim: Option<JoinHandle<Sim>>,
}

impl ServerHandle {
    /// Stops all threads and returns the simulation.
    pub fn shutdown(mut self) -> Sim {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.sim.take().expect("joined once").join().expect("sim thread panicked")
    }

    /// Blocks until the server is shut down from elsewhere.
    pub fn wait(mut self) -> Sim {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.sim.take().expect("joined once").join().expect("sim thread panicked")
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }
}

/// Binds and starts serving `sim`. Returns once the socket is listening.
pub fn serve(sim: Sim, bind: &str, opts: ServeOptions) -> Result<ServerHandle, BindError> {
    let bind_err = |source| BindError {
        addr: bind.to_string(),
        source,
    };
    let addr = bind
        .to_socket_addrs()
        .map_err(bind_err)?
        .next()
        .ok_or_else(|| bind_err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "no address")))?;
    let listener = TcpListener::bind(addr).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let commands: Arc<BoundedQueue<(u64, Incoming)>> = Arc::new(BoundedQueue::new(COMMAND_QUEUE_DEPTH));
    let joins: Arc<BoundedQueue<ClientSlot>> = Arc::new(BoundedQueue::new(64));

    let acceptor = {
        let shutdown = shutdown.clone();
        let commands = commands.clone();
        let joins = joins.clone();
        thread::spawn(move || accept_loop(listener, shutdown, commands, joins))
    };
    let sim_thread = {
        let shutdown = shutdown.clone();
        thread::spawn(move || sim_loop(sim, opts, shutdown, commands, joins))
    };
    Ok(ServerHandle {
        addr,
        shutdown,
        threads: vec![acceptor],
        sim: Some(sim_thread),
    })
}

fn accept_loop(
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
    commands: Arc<BoundedQueue<(u64, Incoming)>>,
    joins: Arc<BoundedQueue<ClientSlot>>,
) {
    let next_id = AtomicU64::new(1);
    let mut clients = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = next_id.fetch_add(1, Ordering::SeqCst);
                let outbox = Arc::new(BoundedQueue::new(CLIENT_QUEUE_DEPTH));
                let closed = Arc::new(AtomicBool::new(false));
                joins.push(ClientSlot {
                    id,
                    outbox: outbox.clone(),
                    closed: closed.clone(),
                    seen_drops: 0,
                    greeted: false,
                });
                let shutdown = shutdown.clone();
                let commands = commands.clone();
                clients.push(thread::spawn(move || {
                    client_loop(stream, id, outbox, commands, shutdown);
                    closed.store(true, Ordering::SeqCst);
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
    for c in clients {
        let _ = c.join();
    }
}

fn client_loop(
    stream: TcpStream,
    id: u64,
    outbox: Arc<BoundedQueue<Arc<String>>>,
    commands: Arc<BoundedQueue<(u64, Incoming)>>,
    shutdown: Arc<AtomicBool>,
) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    while !shutdown.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(WsMessage::Text(text)) => match parse_command(&text) {
                Ok(inc) => {
                    commands.push((id, inc));
                }
                Err((id, message)) => {
                    let reply = Message::Error { id, message }.to_json();
                    if ws.send(WsMessage::Text(reply)).is_err() {
                        return;
                    }
                }
            },
            Ok(WsMessage::Binary(_)) => {
                let reply = Message::Error {
                    id: None,
                    message: "parse error: binary frames are not supported".into(),
                }
                .to_json();
                if ws.send(WsMessage::Text(reply)).is_err() {
                    return;
                }
            }
            Ok(WsMessage::Close(_)) => return,
            Ok(_) => {}
            Err(WsError::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
        for m in outbox.drain() {
            if ws.write(WsMessage::Text(m.as_str().to_owned())).is_err() {
                return;
            }
        }
        if ws.flush().is_err() {
            return;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}

/// Last broadcast state, so that only changes go out.
#[derive(Default)]
struct Broadcast {
    grid: DeltaEncoder,
    costmap: DeltaEncoder,
    costmap_src: Option<Arc<Costmap>>,
    path: Option<Arc<Path>>,
    path_version: u64,
    nav: Option<(NavStatus, u32)>,
    scan_stamp: Option<f64>,
}

fn grid_message(d: (u64, Option<u64>, GridInfo, Vec<[i64; 3]>)) -> Message {
    let (version, base_version, info, runs) = d;
    Message::GridDelta {
        version,
        base_version,
        info,
        runs,
    }
}

fn costmap_message(d: (u64, Option<u64>, GridInfo, Vec<[i64; 3]>)) -> Message {
    let (version, base_version, info, runs) = d;
    Message::CostmapDelta {
        version,
        base_version,
        info,
        runs,
    }
}

fn hello(sim: &Sim) -> Message {
    Message::Hello {
        server: format!("dronenav {}", env!("CARGO_PKG_VERSION")),
        mode: sim.mode,
        world: sim.world.clone(),
    }
}

fn snapshot(sim: &Sim) -> Message {
    let s = &sim.state;
    Message::Snapshot {
        t: sim.now(),
        mode: sim.mode,
        truth: sim.truth_pose(),
        z: s.position[2],
        velocity: s.velocity,
        estimate: sim.estimate(),
        twist: sim.arbitrated_twist(),
        airborne: sim.flight.is_airborne(),
        collisions: sim.collisions,
        status: sim.status.label(),
    }
}

fn nav_message(sim: &Sim) -> Message {
    let st = &sim.navigator.status;
    Message::NavStatus {
        state: st.state,
        goal: st.active_goal,
        diagnostics: st.diagnostics.clone(),
        replans: sim.navigator.replans,
    }
}

fn path_message(path: Option<&Path>, version: u64) -> Message {
    Message::Path {
        version,
        waypoints: path
            .map(|p| p.waypoints.iter().map(|w| [w.x, w.y, w.theta]).collect())
            .unwrap_or_default(),
        cost: path.map_or(0.0, |p| p.cost.value()),
    }
}

fn tf_message(sim: &Sim) -> Message {
    Message::Tf {
        t: sim.now(),
        edges: sim
            .tf
            .edges()
            .map(|(parent, child, t, _)| FrameEdge {
                parent: parent.into(),
                child: child.into(),
                x: t.x,
                y: t.y,
                theta: t.rotation,
            })
            .collect(),
    }
}

fn particles_message(sim: &Sim) -> Option<Message> {
    let set = &sim.amcl.as_ref()?.set;
    let stride = set.particles.len().div_ceil(MAX_PARTICLES).max(1);
    Some(Message::Particles {
        t: sim.now(),
        poses: set
            .particles
            .iter()
            .step_by(stride)
            .map(|p| [p.pose.x, p.pose.y, p.pose.theta])
            .collect(),
    })
}

fn scan_message(sim: &Sim) -> Option<Message> {
    let scan = sim.bus.scan.latest()?;
    Some(Message::Scan {
        t: scan.stamp,
        pose: sim.estimate().unwrap_or_else(|| sim.truth_pose()),
        angle_min: scan.spec.angle_min,
        angle_increment: scan.spec.angle_increment(),
        ranges: scan.ranges.iter().map(|r| r.is_finite().then_some(*r)).collect(),
    })
}

impl Broadcast {
    /// Messages describing what changed since the last call.
    fn changes(&mut self, sim: &Sim) -> Vec<Message> {
        let mut out = vec![snapshot(sim)];
        if let Some(g) = sim.display_grid() {
            if let Some(d) = self.grid.update(GridInfo::from(&g.geometry), occupancy_cells(&g)) {
                out.push(grid_message(d));
            }
        }
        if let Some(cm) = sim.costmap() {
            if !self.costmap_src.as_ref().is_some_and(|c| Arc::ptr_eq(c, cm)) {
                self.costmap_src = Some(cm.clone());
                let cells = cm.cells.iter().map(|c| *c as i64).collect();
                if let Some(d) = self.costmap.update(GridInfo::from(&cm.geometry), cells) {
                    out.push(costmap_message(d));
                }
            }
        }
        let nav = (sim.navigator.status.clone(), sim.navigator.replans);
        if self.nav.as_ref() != Some(&nav) {
            self.nav = Some(nav);
            out.push(nav_message(sim));
        }
        let path = sim.bus.path.latest().cloned().filter(|_| sim.navigator.path.is_some());
        let same = match (&path, &self.path) {
            (Some(a), Some(b)) => Arc::ptr_eq(a, b),
            (None, None) => true,
            _ => false,
        };
        if !same {
            self.path_version += 1;
            out.push(path_message(path.as_deref(), self.path_version));
            self.path = path;
        }
        out.extend(particles_message(sim));
        out.push(tf_message(sim));
        if let Some(scan) = sim.bus.scan.latest() {
            if self.scan_stamp != Some(scan.stamp) {
                self.scan_stamp = Some(scan.stamp);
                out.extend(scan_message(sim));
            }
        }
        out
    }

    /// Everything a client needs to start from scratch.
    fn full(&self, sim: &Sim) -> Vec<Message> {
        let mut out = vec![snapshot(sim)];
        out.extend(self.grid.full().map(grid_message));
        out.extend(self.costmap.full().map(costmap_message));
        out.push(nav_message(sim));
        out.push(path_message(self.path.as_deref(), self.path_version));
        out.extend(particles_message(sim));
        out.push(tf_message(sim));
        out
    }
}

fn send(slot: &ClientSlot, m: &Message) {
    slot.outbox.push(Arc::new(m.to_json()));
}

fn sim_loop(
    mut sim: Sim,
    opts: ServeOptions,
    shutdown: Arc<AtomicBool>,
    commands: Arc<BoundedQueue<(u64, Incoming)>>,
    joins: Arc<BoundedQueue<ClientSlot>>,
) -> Sim {
    let mut clients: Vec<ClientSlot> = Vec::new();
    let mut bc = Broadcast::default();
    let period = Duration::from_secs_f64(1.0 / opts.broadcast_hz.max(1e-3));
    let dt = sim.scenario.clock.physics_dt;
    let started = Instant::now();
    let sim_t0 = sim.now();
    let mut last_broadcast: Option<Instant> = None;
    while !shutdown.load(Ordering::SeqCst) {
        clients.extend(joins.drain());
        clients.retain(|c| !c.closed.load(Ordering::SeqCst));

        for (client, inc) in commands.drain() {
            let reply = match sim.apply(&inc.command) {
                Ok(detail) => Message::Ack {
                    command: inc.command.name().into(),
                    id: inc.id,
                    detail,
                },
                Err(e) => Message::Error {
                    id: inc.id,
                    message: e.to_string(),
                },
            };
            if let Some(c) = clients.iter().find(|c| c.id == client) {
                send(c, &reply);
            }
        }

        let due = last_broadcast.is_none_or(|t| t.elapsed() >= period);
        if due {
            last_broadcast = Some(Instant::now());
            let changes = bc.changes(&sim);
            for c in clients.iter_mut() {
                let dropped = c.outbox.dropped();
                let msgs = if !c.greeted {
                    c.greeted = true;
                    let mut m = vec![hello(&sim)];
                    m.extend(bc.full(&sim));
                    m
                } else if dropped != c.seen_drops {
                    bc.full(&sim)
                } else {
                    changes.clone()
                };
                for m in &msgs {
                    send(c, m);
                }
                c.seen_drops = c.outbox.dropped();
            }
        }

        if opts.realtime {
            let target = started.elapsed().as_secs_f64();
            let behind = ((target - (sim.now() - sim_t0)) / dt).floor().max(0.0) as u64;
            if behind == 0 {
                thread::sleep(Duration::from_millis(1));
            } else {
                sim.step_n(behind.min(sim.clock.steps_for(0.1)));
            }
        } else {
            sim.step_n(sim.scenario.clock.sensor_div);
        }
    }
    sim
}
