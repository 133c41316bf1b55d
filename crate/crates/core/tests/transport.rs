use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udrift::transport::{
    CipherKind, Fate, LinkSpec, Listener, SimConfig, SimNetwork, SimReport, Stream, TraceEvent, TransportConfig,
    TransportError, MAX_PAYLOAD, PROTOCOL_VERSION,
};

fn pattern(len: usize, seed: u64) -> Vec<u8> {
    let mut x = seed | 1;
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

fn drain(s: &Stream) -> Vec<u8> {
    let mut out = Vec::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = s.recv(&mut buf).unwrap();
        if n == 0 {
            return out;
        }
        out.extend_from_slice(&buf[..n]);
    }
}

struct Outcome {
    received: Vec<u8>,
    elapsed_us: u64,
    client_rtt_us: f64,
    report: SimReport,
}

fn transfer(cfg: SimConfig, data: Vec<u8>) -> Outcome {
    let (net, client, server) = SimNetwork::connect(cfg).expect("connect");
    let start = client.now_us();
    let sender = thread::spawn(move || {
        client.send_all(&data).unwrap();
        client.finish();
        // Keep the connection open until the peer has seen everything.
        let mut b = [0u8; 1];
        assert_eq!(client.recv(&mut b).unwrap(), 0);
        let rtt = client.rtt_us();
        client.close().unwrap();
        rtt
    });
    let receiver = thread::spawn(move || {
        let out = drain(&server);
        let end = server.now_us();
        server.close().unwrap();
        (out, end)
    });
    let client_rtt_us = sender.join().unwrap();
    let (received, end) = receiver.join().unwrap();
    Outcome { received, elapsed_us: end - start, client_rtt_us, report: net.finish() }
}

fn capped(mbps: f64) -> TransportConfig {
    TransportConfig { bandwidth_cap_mbps: mbps, ..TransportConfig::default() }
}

#[test]
fn lossless_delivery_is_exact() {
    let data = pattern(300_000, 1);
    let out = transfer(SimConfig::new(capped(100.0), LinkSpec::wan(20.0, 100.0, 0.0, 1)), data.clone());
    assert_eq!(out.received, data);
    // Can't beat one propagation delay plus serialization.
    assert!(out.elapsed_us >= 10_000 + (data.len() as u64 * 8) / 100);
    assert_eq!(out.report.forward.lost, 0);
    assert_eq!(out.report.client.retransmits, 0);
}

#[test]
fn lossy_delivery_recovers() {
    let data = pattern(4 << 20, 2);
    let out = transfer(SimConfig::new(capped(100.0), LinkSpec::wan(30.0, 100.0, 0.05, 9)), data.clone());
    assert_eq!(out.received, data);
    assert!(out.report.forward.lost > 0);
    assert!(out.report.client.retransmits >= out.report.forward.lost / 2);
    assert!(out.report.server.naks_sent > 0);
}

#[test]
fn same_seed_same_trace() {
    let run = |seed| {
        let mut cfg = SimConfig::new(capped(50.0), LinkSpec::wan(40.0, 50.0, 0.02, seed));
        cfg.record_trace = true;
        let out = transfer(cfg, pattern(1 << 20, 3));
        (out.report.trace, out.report.end_time_us)
    };
    let a = run(5);
    let b = run(5);
    assert!(!a.0.is_empty());
    assert_eq!(a, b);
    assert_ne!(a.0, run(6).0);
}

/// Independent model of one link direction: the k-th datagram consumes the
/// k-th draw of the seeded stream, then queues FIFO behind earlier ones.
fn replay(spec: &LinkSpec, events: &[&TraceEvent]) -> Vec<Fate> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut free_at = 0.0f64;
    let mut waiting: Vec<f64> = Vec::new();
    let mut last = 0u64;
    let mut fates = Vec::new();
    for e in events {
        if rng.gen::<f64>() < spec.loss_fraction {
            fates.push(Fate::Lost);
            continue;
        }
        let now = e.time_us as f64;
        waiting.retain(|&t| t > now);
        if waiting.len() >= spec.queue_packets {
            fates.push(Fate::QueueFull);
            continue;
        }
        let tx = e.len as f64 * 8.0 / spec.bandwidth_cap_mbps;
        free_at = free_at.max(now) + tx;
        waiting.push(free_at);
        let at = ((free_at + spec.one_way_delay_ms * 1000.0).round() as u64).max(last);
        last = at;
        fates.push(Fate::Deliver { at });
    }
    fates
}

#[test]
fn trace_matches_link_model() {
    let link = LinkSpec::wan(24.0, 80.0, 0.01, 77);
    let mut cfg = SimConfig::new(capped(80.0), link.clone());
    cfg.record_trace = true;
    let reverse = cfg.reverse.clone();
    let out = transfer(cfg, pattern(2 << 20, 4));
    let trace = &out.report.trace;
    for (dir, spec) in [(0u8, &link), (1u8, &reverse)] {
        let events: Vec<&TraceEvent> = trace.iter().filter(|e| e.direction == dir).collect();
        assert!(events.len() > 10);
        let expected = replay(spec, &events);
        let actual: Vec<Fate> = events.iter().map(|e| e.fate).collect();
        assert_eq!(actual, expected, "direction {dir}");
    }
    let lost = trace.iter().filter(|e| e.direction == 0 && e.fate == Fate::Lost).count() as u64;
    assert_eq!(lost, out.report.forward.lost);
}

#[test]
fn version_mismatch_is_rejected() {
    let mut cfg = SimConfig::new(TransportConfig::default(), LinkSpec::wan(10.0, 0.0, 0.0, 1));
    cfg.server.version = PROTOCOL_VERSION + 1;
    match SimNetwork::connect(cfg) {
        Err(TransportError::HandshakeRejected { local, remote }) => {
            assert_eq!(local, PROTOCOL_VERSION);
            assert_eq!(remote, PROTOCOL_VERSION + 1);
        }
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("connected across versions"),
    }
}

#[test]
fn cipher_without_server_key_is_refused() {
    let client = TransportConfig { cipher: CipherKind::Blowfish, key: Some(b"k3y".to_vec()), ..TransportConfig::default() };
    let mut cfg = SimConfig::new(client, LinkSpec::wan(10.0, 0.0, 0.0, 1));
    cfg.server.key = None;
    assert!(matches!(SimNetwork::connect(cfg), Err(TransportError::CipherUnavailable)));
}

#[test]
fn black_hole_times_out() {
    let mut cfg = SimConfig::new(TransportConfig::default(), LinkSpec::wan(10.0, 0.0, 1.0, 1));
    cfg.record_trace = true;
    assert!(matches!(SimNetwork::connect(cfg), Err(TransportError::ConnectTimeout)));
}

#[test]
fn rtt_estimate_converges() {
    // Well under capacity so queueing adds nothing.
    let out = transfer(SimConfig::new(capped(5.0), LinkSpec::wan(60.0, 100.0, 0.0, 2)), pattern(200_000, 5));
    assert!((out.client_rtt_us - 60_000.0).abs() < 6_000.0, "rtt {}", out.client_rtt_us);
}

#[test]
fn stop_and_wait_pays_a_round_trip_per_packet() {
    let data = pattern(100 * MAX_PAYLOAD, 6);
    let tc = TransportConfig { stop_and_wait: true, ..capped(100.0) };
    let out = transfer(SimConfig::new(tc, LinkSpec::wan(20.0, 100.0, 0.0, 3)), data.clone());
    assert_eq!(out.received, data);
    let pkts = out.report.client.data_pkts_sent;
    assert!(pkts >= 100);
    assert!(out.elapsed_us >= 99 * 20_000, "{} us", out.elapsed_us);
}

#[test]
fn blowfish_transfer_round_trips() {
    let tc = TransportConfig {
        cipher: CipherKind::Blowfish,
        key: Some(b"correct horse battery".to_vec()),
        ..capped(100.0)
    };
    let data = pattern(1 << 20, 7);
    let (net, client, server) = SimNetwork::connect(SimConfig::new(tc, LinkSpec::wan(10.0, 100.0, 0.01, 4))).unwrap();
    assert_eq!(client.params().cipher, CipherKind::Blowfish);
    assert_eq!(server.params().cipher, CipherKind::Blowfish);
    let payload = data.clone();
    let t = thread::spawn(move || {
        client.send_all(&payload).unwrap();
        client.close().unwrap();
    });
    assert_eq!(drain(&server), data);
    server.close().unwrap();
    drop(server);
    t.join().unwrap();
    net.finish();
}

#[test]
fn both_directions_at_once() {
    let (net, client, server) = SimNetwork::connect(SimConfig::new(capped(100.0), LinkSpec::wan(16.0, 100.0, 0.01, 8))).unwrap();
    let up = pattern(600_000, 8);
    let down = pattern(700_000, 9);
    let (u, d) = (up.clone(), down.clone());
    let a = thread::spawn(move || {
        let w = {
            let c = &client;
            thread::scope(|s| {
                let h = s.spawn(|| drain(c));
                c.send_all(&u).unwrap();
                c.finish();
                h.join().unwrap()
            })
        };
        client.close().unwrap();
        w
    });
    let b = thread::spawn(move || {
        let w = {
            let c = &server;
            thread::scope(|s| {
                let h = s.spawn(|| drain(c));
                c.send_all(&d).unwrap();
                c.finish();
                h.join().unwrap()
            })
        };
        server.close().unwrap();
        w
    });
    assert_eq!(a.join().unwrap(), down);
    assert_eq!(b.join().unwrap(), up);
    net.finish();
}

#[test]
fn udp_loopback_transfer() {
    let listener = Listener::bind("127.0.0.1:0", TransportConfig::default()).unwrap();
    let addr = listener.local_addr().unwrap();
    let data = pattern(2 << 20, 10);
    let expected = data.clone();
    let server = thread::spawn(move || {
        let s = listener.accept().unwrap();
        let got = drain(&s);
        s.close().unwrap();
        got
    });
    let c = udrift::transport::connect(addr, TransportConfig::default()).unwrap();
    c.send_all(&data).unwrap();
    c.close().unwrap();
    assert_eq!(server.join().unwrap(), expected);
}

#[test]
fn udp_connect_to_silent_port_times_out() {
    let silent = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
    let cfg = TransportConfig { connect_attempts: 2, connect_retry_us: 100_000, ..TransportConfig::default() };
    let r = udrift::transport::connect(silent.local_addr().unwrap(), cfg);
    assert!(matches!(r, Err(TransportError::ConnectTimeout)));
}
