use std::net::TcpStream;
use std::path::Path;
use std::time::{Duration, Instant};

use dronenav_core::geom::Pose2D;
use dronenav_core::mapping::{occupancy_from_world, GridGeometry};
use dronenav_core::nav::NavState;
use dronenav_core::world::WorldModel;
use dronenav_runtime::mapio::save_map;
use dronenav_runtime::protocol::{apply_runs, parse_message, Message};
use dronenav_runtime::scenario::{Mode, Scenario};
use dronenav_runtime::server::{serve, ServeOptions, ServerHandle};
use dronenav_runtime::sim::Sim;
use serde_json::json;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::WebSocket;

struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
}

impl Client {
    fn connect(h: &ServerHandle) -> Self {
        let (ws, _) = tungstenite::connect(format!("ws://{}", h.addr)).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
        }
        Self { ws }
    }

    fn send(&mut self, v: serde_json::Value) {
        self.send_text(&v.to_string());
    }

    fn send_text(&mut self, text: &str) {
        self.ws.send(tungstenite::Message::text(text)).unwrap();
    }

    /// Reads messages until `f` picks one, for at most 20 s.
    fn until<T>(&mut self, mut f: impl FnMut(&Message) -> Option<T>) -> T {
        let deadline = Instant::now() + Duration::from_secs(20);
        while Instant::now() < deadline {
            match self.ws.read() {
                Ok(tungstenite::Message::Text(t)) => {
                    let raw: serde_json::Value = serde_json::from_str(&t).unwrap();
                    assert_eq!(raw["v"], 1, "{t}");
                    if let Some(x) = f(&parse_message(&t).unwrap()) {
                        return x;
                    }
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => panic!("connection lost: {e}"),
            }
        }
        panic!("no matching message within 20 s");
    }
}

fn navigation_sim(dir: &Path) -> Sim {
    let world = WorldModel::sample();
    let geo = GridGeometry::new(0.05, 209, 209, Pose2D::new(-0.225, -0.225, 0.0));
    let yaml = save_map(&occupancy_from_world(&world, &geo), &dir.join("truth")).unwrap();
    let mut sc = Scenario::sample();
    sc.mode = Mode::Navigation;
    sc.map_path = Some(yaml);
    Sim::new(sc).unwrap()
}

fn local(sim: Sim, realtime: bool) -> ServerHandle {
    serve(
        sim,
        "127.0.0.1:0",
        ServeOptions {
            realtime,
            ..ServeOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn set_goal_enters_planning() {
    let dir = tempfile::tempdir().unwrap();
    let h = local(navigation_sim(dir.path()), true);
    let mut c = Client::connect(&h);
    let world = c.until(|m| match m {
        Message::Hello { mode, world, .. } => Some((*mode, world.clone())),
        _ => None,
    });
    assert_eq!(world.0, Mode::Navigation);
    assert_eq!(world.1, WorldModel::sample());
    c.until(|m| matches!(m, Message::NavStatus { state: NavState::Idle, .. }).then_some(()));
    c.send(json!({"v": 1, "type": "set_goal", "x": 8.0, "y": 8.0, "theta": 0.0, "id": 7}));
    let id = c.until(|m| match m {
        Message::Ack { command, id, .. } if command == "set_goal" => Some(id.clone()),
        _ => None,
    });
    assert_eq!(id, Some(json!(7)));
    let goal = c.until(|m| match m {
        Message::NavStatus {
            state: NavState::Planning,
            goal,
            ..
        } => Some(*goal),
        _ => None,
    });
    assert_eq!(goal, Some(Pose2D::new(8.0, 8.0, 0.0)));
    let sim = h.shutdown();
    assert_ne!(sim.navigator.state(), NavState::Idle);
}

#[test]
fn malformed_input_is_answered_not_dropped() {
    let h = local(Sim::new(Scenario::sample()).unwrap(), true);
    let mut c = Client::connect(&h);
    c.send_text("{\"type\": \"teleop_twist\", ");
    let msg = c.until(|m| match m {
        Message::Error { message, .. } => Some(message.clone()),
        _ => None,
    });
    assert!(msg.contains("parse"), "{msg}");

    c.send(json!({"type": "fly_to_moon", "id": "a"}));
    let (id, msg) = c.until(|m| match m {
        Message::Error { id, message } => Some((id.clone(), message.clone())),
        _ => None,
    });
    assert_eq!(id, Some(json!("a")));
    assert!(msg.starts_with("invalid command"), "{msg}");

    c.send(json!({"v": 2, "type": "reset"}));
    let msg = c.until(|m| match m {
        Message::Error { message, .. } => Some(message.clone()),
        _ => None,
    });
    assert!(msg.contains("protocol version"), "{msg}");

    // set_goal is refused in MAPPING with an error, not a disconnect
    c.send(json!({"type": "set_goal", "x": 1.0, "y": 1.0, "theta": 0.0, "id": 3}));
    c.until(|m| matches!(m, Message::Error { id: Some(i), .. } if *i == json!(3)).then_some(()));

    c.send(json!({"type": "teleop_twist", "linear": {"x": 0.1}, "id": 4}));
    c.until(|m| matches!(m, Message::Ack { id: Some(i), .. } if *i == json!(4)).then_some(()));
    h.shutdown();
}

#[test]
fn teleop_stream_latest_wins() {
    let h = local(Sim::new(Scenario::sample()).unwrap(), true);
    let mut c = Client::connect(&h);
    c.until(|m| matches!(m, Message::Hello { .. }).then_some(()));
    let mut last = 0.0;
    for k in 0..15 {
        last = 0.01 * (k + 1) as f64;
        c.send(json!({"type": "teleop_twist", "linear": {"x": last}, "angular": {"z": -last}}));
        std::thread::sleep(Duration::from_millis(1000 / 15));
    }
    let twist = c.until(|m| match m {
        Message::Snapshot { twist, .. } if twist.linear.x == last => Some(*twist),
        _ => None,
    });
    assert_eq!(twist.angular.z, -last);
    let sim = h.shutdown();
    assert_eq!(sim.bus.twist_cmd.latest().map(|t| t.linear.x), Some(last));
}

#[test]
fn grid_deltas_rebuild_the_map() {
    let h = local(Sim::new(Scenario::sample()).unwrap(), false);
    let mut c = Client::connect(&h);
    let mut cells: Vec<i64> = Vec::new();
    let mut version = None;
    let mut deltas = 0;
    c.until(|m| {
        if let Message::GridDelta {
            version: v,
            base_version,
            info,
            runs,
        } = m
        {
            match base_version {
                None => cells = vec![-1; info.width * info.height],
                Some(b) => assert_eq!(Some(*b), version, "delta must build on the last version"),
            }
            assert_eq!(cells.len(), info.width * info.height);
            apply_runs(&mut cells, runs).unwrap();
            version = Some(*v);
            deltas += 1;
        }
        (deltas >= 20).then_some(())
    });
    assert!(cells.contains(&100) && cells.contains(&0));
    let mut late = Client::connect(&h);
    let first = late.until(|m| match m {
        Message::GridDelta { base_version, .. } => Some(*base_version),
        _ => None,
    });
    assert_eq!(first, None, "a joining client starts from a full grid");
    h.shutdown();
}

#[test]
fn occupied_port_is_a_bind_error() {
    let h = local(Sim::new(Scenario::sample()).unwrap(), true);
    let Err(err) = serve(Sim::new(Scenario::sample()).unwrap(), &h.addr.to_string(), ServeOptions::default()) else {
        panic!("second bind on {} succeeded", h.addr);
    };
    assert!(err.to_string().contains(&h.addr.to_string()));
    h.shutdown();
}
