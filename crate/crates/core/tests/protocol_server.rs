use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use mirrorlink::protocol::{
    measure_latency, ControlMsg, EchoTransport, HandBlock, LatencyEcho, LatencyError, TeleopFrame,
};
use mirrorlink::server::{stream_server, Role, ServerConfig, StateSnapshot, TeleopClient};

type Log = Arc<Mutex<Vec<(u32, u64)>>>;

fn recording_server(tick_hz: f64) -> (mirrorlink::server::ServerHandle, Log, Arc<Mutex<Vec<ControlMsg>>>) {
    let log: Log = Arc::default();
    let controls: Arc<Mutex<Vec<ControlMsg>>> = Arc::default();
    let (l, c) = (log.clone(), controls.clone());
    let cfg = ServerConfig {
        bind: "127.0.0.1:0".into(),
        tick_hz,
        ..ServerConfig::default()
    };
    let server = stream_server(&cfg, move |f: Option<&TeleopFrame>, ctl: &[ControlMsg], now: u64| {
        if let Some(f) = f {
            l.lock().unwrap().push((f.seq, now));
        }
        c.lock().unwrap().extend_from_slice(ctl);
        StateSnapshot::default()
    })
    .unwrap();
    (server, log, controls)
}

fn frame(seq: u32) -> TeleopFrame {
    TeleopFrame {
        seq,
        timestamp_micros: seq as u64,
        hands: [HandBlock::identity(); 2],
    }
}

/// Sends `seqs` at `hz` on an absolute schedule.
fn paced_send(client: &mut TeleopClient, seqs: impl IntoIterator<Item = u32>, hz: f64) {
    let start = Instant::now();
    let period = Duration::from_secs_f64(1.0 / hz);
    for (i, s) in seqs.into_iter().enumerate() {
        let due = start + period.mul_f64(i as f64);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        client.send_frame(&frame(s)).unwrap();
    }
}

#[test]
fn loopback_90hz_for_10s_consumes_at_least_99_percent() {
    let (server, log, _) = recording_server(120.0);
    let mut client = TeleopClient::connect(&server.url()).unwrap();
    paced_send(&mut client, 1..=900, 90.0);
    std::thread::sleep(Duration::from_millis(100));
    let stats = server.shutdown();
    let teleop = &stats.connections[0];
    assert_eq!(teleop.role, Role::Teleop);
    assert_eq!(teleop.received, 900);
    assert_eq!(teleop.out_of_order, 0);
    let consumed = log.lock().unwrap().len();
    assert!(consumed as f64 >= 0.99 * 900.0, "consumed {consumed}/900");
    let seqs: Vec<u32> = log.lock().unwrap().iter().map(|x| x.0).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn pairwise_reversed_sender_is_half_out_of_order() {
    let (server, log, _) = recording_server(120.0);
    let mut client = TeleopClient::connect(&server.url()).unwrap();
    let seqs = (0..100u32).flat_map(|k| [2 * k + 2, 2 * k + 1]);
    paced_send(&mut client, seqs, 90.0);

    // Observer watches the echo stream while the teleop client sends.
    let mut echoes = Vec::new();
    let mut observer = TeleopClient::connect(&server.url()).unwrap();
    let until = Instant::now() + Duration::from_millis(200);
    while Instant::now() < until {
        if let Some(s) = observer.recv_state(Duration::from_millis(50)).unwrap() {
            echoes.push(s.echo_seq);
        }
    }
    let stats = server.shutdown();
    let t = &stats.connections[0];
    assert_eq!(t.received, 200);
    assert_eq!(t.out_of_order, 100);
    assert_eq!(stats.connections[1].role, Role::Observer);
    assert!(!echoes.is_empty());
    assert!(echoes.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*echoes.last().unwrap(), 200);
    let seqs: Vec<u32> = log.lock().unwrap().iter().map(|x| x.0).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn idle_server_publishes_with_frozen_echo() {
    let (server, _, _) = recording_server(100.0);
    let mut observer = TeleopClient::connect(&server.url()).unwrap();
    let start = Instant::now();
    let mut states = Vec::new();
    while start.elapsed() < Duration::from_millis(500) {
        if let Some(s) = observer.recv_state(Duration::from_millis(50)).unwrap() {
            states.push(s);
        }
    }
    assert!(states.len() >= 40, "{} states in 0.5 s at 100 Hz", states.len());
    assert!(states.iter().all(|s| s.echo_seq == 0));
    assert!(states.windows(2).all(|w| w[0].seq < w[1].seq));
    let ticks = server.shutdown().ticks;
    assert!((45..=55).contains(&ticks), "ticks {ticks}");
}

#[test]
fn freshest_frame_wins_between_ticks() {
    let (server, log, _) = recording_server(4.0);
    let mut client = TeleopClient::connect(&server.url()).unwrap();
    // Align just after a tick, then burst.
    client.recv_state(Duration::from_secs(1)).unwrap().unwrap();
    for s in 1..=5 {
        client.send_frame(&frame(s)).unwrap();
    }
    std::thread::sleep(Duration::from_millis(400));
    let stats = server.shutdown();
    assert_eq!(log.lock().unwrap().iter().map(|x| x.0).collect::<Vec<_>>(), vec![5]);
    assert_eq!(stats.connections[0].dropped, 4);
    assert_eq!(stats.consumed, 1);
}

#[test]
fn decode_error_closes_only_that_connection() {
    let (server, log, controls) = recording_server(200.0);
    let mut teleop = TeleopClient::connect(&server.url()).unwrap();
    let mut bad = TeleopClient::connect(&server.url()).unwrap();
    bad.send_raw(b"XXXXnot a frame".to_vec()).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    teleop.send_frame(&frame(1)).unwrap();
    teleop
        .send_control(&ControlMsg {
            reset: true,
            ..ControlMsg::default()
        })
        .unwrap();
    std::thread::sleep(Duration::from_millis(50));
    let stats = server.stats();
    server.shutdown();
    assert!(stats.connections[0].open);
    assert!(!stats.connections[1].open);
    assert_eq!(log.lock().unwrap().len(), 1);
    assert!(controls.lock().unwrap()[0].reset);
}

#[test]
fn observer_frames_are_ignored() {
    let (server, log, _) = recording_server(200.0);
    let _teleop = TeleopClient::connect(&server.url()).unwrap();
    let mut obs = TeleopClient::connect(&server.url()).unwrap();
    obs.send_frame(&frame(9)).unwrap();
    std::thread::sleep(Duration::from_millis(50));
    let stats = server.shutdown();
    assert_eq!(stats.connections[1].dropped, 1);
    assert!(log.lock().unwrap().is_empty());
}

#[test]
fn loopback_latency_p99_below_5ms() {
    let (server, _, _) = recording_server(120.0);
    let mut client = TeleopClient::connect(&server.url()).unwrap();
    let stats = measure_latency(&mut client, 200, Duration::from_secs(10)).unwrap();
    assert_eq!(stats.samples, 200);
    assert!(stats.p99_us < 5_000.0, "{stats:?}");
    assert!(stats.mean_us >= 0.0);
}

/// Echoes probes after a fixed one-way delay in each direction.
struct DelayShim {
    one_way: Duration,
    queue: std::collections::VecDeque<(Instant, Vec<u8>)>,
}

impl EchoTransport for DelayShim {
    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.queue.push_back((Instant::now() + 2 * self.one_way, bytes.to_vec()));
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> std::io::Result<Option<Vec<u8>>> {
        let Some((due, _)) = self.queue.front() else {
            std::thread::sleep(timeout);
            return Ok(None);
        };
        let wait = due.saturating_duration_since(Instant::now());
        if wait > timeout {
            std::thread::sleep(timeout);
            return Ok(None);
        }
        std::thread::sleep(wait);
        Ok(self.queue.pop_front().map(|x| x.1))
    }
}

#[test]
fn delay_shim_mean_matches_injected_delay() {
    let mut shim = DelayShim {
        one_way: Duration::from_millis(50),
        queue: Default::default(),
    };
    let stats = measure_latency(&mut shim, 20, Duration::from_secs(10)).unwrap();
    assert!((stats.mean_us - 50_000.0).abs() <= 5_000.0, "{stats:?}");
}

#[test]
fn latency_times_out_with_insufficient_samples() {
    let mut shim = DelayShim {
        one_way: Duration::from_millis(50),
        queue: Default::default(),
    };
    let err = measure_latency(&mut shim, 20, Duration::from_millis(300)).unwrap_err();
    assert!(matches!(err, LatencyError::InsufficientSamples { wanted: 20, .. }));
}

#[test]
fn probes_are_echoed_verbatim() {
    let (server, _, _) = recording_server(50.0);
    let mut c = TeleopClient::connect(&server.url()).unwrap();
    let p = LatencyEcho {
        seq: 77,
        timestamp_micros: 123,
    };
    c.send_latency_probe(&p).unwrap();
    let deadline = Instant::now() + Duration::from_secs(1);
    loop {
        let b = c.recv_bytes(Duration::from_millis(100)).unwrap();
        if let Some(b) = b {
            if let Ok(e) = LatencyEcho::decode(&b) {
                assert_eq!(e, p);
                break;
            }
        }
        assert!(Instant::now() < deadline);
    }
}

#[test]
fn bind_failure_is_reported() {
    let (server, _, _) = recording_server(50.0);
    let cfg = ServerConfig {
        bind: server.local_addr().to_string(),
        ..ServerConfig::default()
    };
    assert!(stream_server(&cfg, |_: Option<&TeleopFrame>, _: &[ControlMsg], _| StateSnapshot::default()).is_err());
}
