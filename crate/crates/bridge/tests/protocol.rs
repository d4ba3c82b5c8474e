//! End-to-end protocol checks against a live server on a loopback port.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use ase_bridge::protocol::client_json;
use ase_bridge::{ActionSpec, BridgeConfig, ClientMessage, Observation, ServerMessage, SessionManager, StartRequest};
use ase_core::assistant::logistic_invert;
use ase_core::env::TiltLanderEnv;
use ase_core::harness::nav::NavStepper;
use ase_core::harness::{derive_seed, Condition, Stream};
use ase_core::learner::{read_demonstrations, Demonstration, ShownObservation};
use futures_util::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio_tungstenite::tungstenite::Message;

type Client = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn spawn_server(config: BridgeConfig) -> (SocketAddr, Arc<SessionManager>) {
    let manager = Arc::new(SessionManager::new(config).unwrap());
    let (tx, rx) = tokio::sync::oneshot::channel();
    let m = manager.clone();
    tokio::spawn(async move {
        ase_bridge::server::serve(m, "127.0.0.1:0".parse().unwrap(), move |addr| {
            let _ = tx.send(addr);
        })
        .await
        .unwrap();
    });
    (rx.await.unwrap(), manager)
}

async fn connect(addr: SocketAddr) -> Client {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn send(client: &mut Client, msg: &ClientMessage) {
    client.send(Message::text(client_json(msg))).await.unwrap();
}

async fn recv(client: &mut Client) -> ServerMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), client.next())
            .await
            .expect("server reply")
            .unwrap()
            .unwrap();
        if let Message::Text(text) = msg {
            return serde_json::from_str(text.as_str()).unwrap();
        }
    }
}

async fn http_get(addr: SocketAddr, path: &str) -> serde_json::Value {
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let request = format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes()).await.unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).await.unwrap();
    let json = &body[body.find("\r\n\r\n").unwrap() + 4..];
    serde_json::from_str(json.trim()).unwrap()
}

fn without_session(msg: &ServerMessage) -> serde_json::Value {
    let mut v = serde_json::to_value(msg).unwrap();
    v.as_object_mut().unwrap().remove("session");
    v
}

fn read_log(manager: &SessionManager) -> Vec<Demonstration> {
    manager.flush_log();
    let file = std::fs::File::open(manager.log_path().unwrap()).unwrap();
    read_demonstrations(std::io::BufReader::new(file)).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_nav_episode_round_trip_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let config = BridgeConfig {
        log_dir: Some(dir.path().to_path_buf()),
        root_seed: 17,
        ..Default::default()
    };
    let (addr, manager) = spawn_server(config.clone()).await;
    assert_eq!(http_get(addr, "/health").await["status"], "ok");

    let mut client = connect(addr).await;
    let mut start = StartRequest::new("grid_nav", "ase");
    start.theta = Some(vec![0.0]);
    start.episode = Some(3);
    send(&mut client, &ClientMessage::Start(start.clone())).await;
    let first = recv(&mut client).await;
    let session = first.session().unwrap();
    assert_eq!(http_get(addr, "/sessions").await["count"], 1);

    let mut frames = vec![first];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let summary = loop {
        let action = ActionSpec::Index(rng.random_range(0..3));
        send(&mut client, &ClientMessage::Action { session, action }).await;
        match recv(&mut client).await {
            frame @ ServerMessage::Frame { .. } => frames.push(frame),
            summary @ ServerMessage::Summary { .. } => break summary,
            other => panic!("unexpected {other:?}"),
        }
    };
    let ServerMessage::Summary { metrics, label_prompt, root_seed, episode, .. } = summary else { unreachable!() };
    assert!(!label_prompt);
    assert_eq!((root_seed, episode), (17, 3));

    let demos = read_log(&manager);
    assert_eq!(demos.len(), 1);
    let demo = &demos[0];
    assert_eq!(demo.observations.len(), frames.len());
    assert_eq!(demo.actions.len(), frames.len());
    if metrics.success == Some(true) {
        assert_eq!(metrics.time_to_goal, Some(demo.actions.len()));
    }

    // replay through a fresh server-side session
    let replay = SessionManager::new(BridgeConfig {
        log_dir: None,
        tick_hz: 0.0,
        ..config
    })
    .unwrap();
    let mut again = replay.handle(ClientMessage::Start(start), None).messages;
    let id = again[0].session().unwrap();
    for &a in &demo.actions[..demo.actions.len() - 1] {
        again.extend(
            replay
                .handle(ClientMessage::Action { session: id, action: ActionSpec::Index(a) }, None)
                .messages,
        );
    }
    let a: Vec<_> = frames.iter().map(without_session).collect();
    let b: Vec<_> = again.iter().map(without_session).collect();
    assert_eq!(a, b);

    // and through the simulation pipeline directly
    let world = manager.nav_world();
    let model = world.model_for(&[0.0]).unwrap();
    let task = world.sample_task(17, 3);
    let mut stepper = NavStepper::new(world, task, Condition::Ase, Some(&model), 17, 3).unwrap();
    for (shown, &a) in demo.observations.iter().zip(&demo.actions) {
        let ids: Vec<usize> = stepper.observe(world).unwrap().iter().map(|o| o.0).collect();
        assert_eq!(shown, &ShownObservation::Objects { ids });
        stepper.act(world, a).unwrap();
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn lander_ase_first_frame_inverts_true_angle() {
    let dir = tempfile::tempdir().unwrap();
    let theta_file = dir.path().join("fit.json");
    std::fs::write(&theta_file, r#"{"theta_hat": [0.05, 0.3], "log_likelihood": -1.0}"#).unwrap();
    let config = BridgeConfig {
        root_seed: 8,
        ..Default::default()
    };
    let (addr, _manager) = spawn_server(config.clone()).await;
    let mut client = connect(addr).await;
    let mut start = StartRequest::new("tilt_lander", "ase");
    start.theta_file = Some(theta_file);
    start.episode = Some(2);
    start.debug = true;
    send(&mut client, &ClientMessage::Start(start)).await;
    let ServerMessage::Frame { observation: Observation::Lander { indicator_angle }, render_hints, .. } =
        recv(&mut client).await
    else {
        panic!("expected a lander frame");
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(8, 2, Stream::Env));
    let env = TiltLanderEnv::generate(config.lander.lander.clone(), &mut rng).unwrap();
    let truth = env.observe(&env.reset());
    assert_eq!(render_hints.true_angle, Some(truth));
    let expected = logistic_invert(truth, 0.05, 0.3).unwrap().payload;
    assert!((indicator_angle - expected).abs() < 1e-12);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn realtime_lander_runs_on_no_ops_and_takes_a_label() {
    let dir = tempfile::tempdir().unwrap();
    let config = BridgeConfig {
        tick_hz: 300.0,
        log_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let horizon = config.lander.lander.horizon;
    let (addr, manager) = spawn_server(config).await;
    let mut client = connect(addr).await;
    send(&mut client, &ClientMessage::Start(StartRequest::new("tilt_lander", "unassisted"))).await;
    let session = recv(&mut client).await.session().unwrap();
    let mut frames = 1;
    let summary = loop {
        match recv(&mut client).await {
            ServerMessage::Frame { t, .. } => {
                assert_eq!(t, frames);
                frames += 1;
            }
            other => break other,
        }
    };
    assert_eq!(frames, horizon);
    assert!(matches!(summary, ServerMessage::Summary { label_prompt: true, .. }));
    send(&mut client, &ClientMessage::Label { session, task: "keep level".into() }).await;
    assert!(matches!(recv(&mut client).await, ServerMessage::Labeled { .. }));
    let demos = read_log(&manager);
    assert_eq!(demos.len(), 1);
    assert_eq!(demos[0].actions.len(), horizon);
    assert!(demos[0].actions.iter().all(|&a| a == 2));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn protocol_errors_are_reported_not_fatal() {
    let (addr, _manager) = spawn_server(BridgeConfig::default()).await;
    let mut client = connect(addr).await;
    client.send(Message::text("not json")).await.unwrap();
    assert!(matches!(recv(&mut client).await, ServerMessage::Error { .. }));
    client
        .send(Message::text(r#"{"v":2,"type":"start","env":"grid_nav","condition":"ase"}"#))
        .await
        .unwrap();
    let ServerMessage::Error { code, .. } = recv(&mut client).await else { panic!() };
    assert_eq!(code, ase_bridge::ErrorCode::UnsupportedVersion);
    send(&mut client, &ClientMessage::Start(StartRequest::new("moon", "ase"))).await;
    let ServerMessage::Error { code, .. } = recv(&mut client).await else { panic!() };
    assert_eq!(code, ase_bridge::ErrorCode::UnknownEnv);
    // the connection still works
    send(&mut client, &ClientMessage::Start(StartRequest::new("grid_nav", "unassisted"))).await;
    assert!(matches!(recv(&mut client).await, ServerMessage::Frame { .. }));
}
