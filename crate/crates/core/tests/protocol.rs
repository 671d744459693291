mod common;

use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use accordion::arch::{DepthConfig, Scheme};
use accordion::protocol::*;
use accordion::Error;
use common::{fig2_endpoint, fig2_spec, random_batch};
use proptest::prelude::*;

fn fig2_scenario() -> Scenario {
    Scenario {
        link: LinkModel::new(240_000_000, Duration::ZERO).unwrap(),
        requirements: Requirements {
            model_id: ANY_MODEL,
            scheme: Scheme::CoML,
            deadline_ms: 200,
            throughput_bps: 240_000_000,
            max_error: None,
        },
        upgrades: vec![UpgradeTarget::Units(12)],
        charge_overhead: false,
    }
}

#[test]
fn fig2_session_end_to_end() {
    let endpoint = fig2_endpoint();
    let (log, partial) = simulate_session(&endpoint, &fig2_scenario()).unwrap();
    let done = log.last("transfer_done").unwrap();
    assert_eq!(done.achievable_n, Some(4));
    assert_eq!(done.time, Duration::from_millis(200));
    assert_eq!(done.bits, 48_000_000);
    let up = log.last("upgrade_done").unwrap();
    assert_eq!(up.achievable_n, Some(12));
    assert_eq!(up.bits, 80_000_000);

    let spec = fig2_spec();
    let manifest = endpoint.manifest(Scheme::CoML);
    assert_eq!(log.chunk_payload_bytes, manifest.payload_bytes_for(spec.total_units()));
    let mut seen = log.chunks_received.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), log.chunks_received.len());
    assert_eq!(seen.len(), manifest.total_chunks());

    let x = random_batch(16, spec.input_dim, 3);
    let full = DepthConfig::full(Scheme::CoML, &spec);
    assert_eq!(partial.forward(12, &x).unwrap(), endpoint.model().forward(&full, &x).unwrap());
}

#[test]
fn session_csv_has_four_events() {
    let (log, _) = simulate_session(&fig2_endpoint(), &fig2_scenario()).unwrap();
    let csv = log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "event,time_s,bits,achievable_n,predicted_error");
    let events: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(events, ["request", "transfer_done", "upgrade_request", "upgrade_done"]);
}

#[test]
fn overhead_charging_costs_more() {
    let endpoint = fig2_endpoint();
    let mut s = fig2_scenario();
    s.charge_overhead = true;
    let (log, _) = simulate_session(&endpoint, &s).unwrap();
    assert!(log.last("transfer_done").unwrap().time > Duration::from_millis(200));
}

#[test]
fn rtt_is_added_per_request() {
    let endpoint = fig2_endpoint();
    let mut s = fig2_scenario();
    s.link.rtt_ns = 10_000_000;
    let (log, _) = simulate_session(&endpoint, &s).unwrap();
    assert_eq!(log.last("transfer_done").unwrap().time, Duration::from_millis(210));
    // 32 Mbit more at 240 Mbps, plus a second round trip
    let expected = Duration::from_nanos(210_000_000 + 10_000_000 + 133_333_334);
    assert_eq!(log.last("upgrade_done").unwrap().time, expected);
}

#[test]
fn accuracy_upgrade_takes_smallest_reaching_config() {
    let endpoint = fig2_endpoint();
    let mut s = fig2_scenario();
    // errors are 0.05 + 0.4 (1 - n/12); n = 9 gives 0.15
    s.upgrades = vec![UpgradeTarget::MaxError(0.15 + 1e-9)];
    let (log, _) = simulate_session(&endpoint, &s).unwrap();
    assert_eq!(log.last("upgrade_done").unwrap().achievable_n, Some(9));
}

#[test]
fn tcp_fetch_and_upgrade() {
    let endpoint = Arc::new(fig2_endpoint());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = {
        let endpoint = Arc::clone(&endpoint);
        std::thread::spawn(move || serve(listener, endpoint, Some(1)))
    };
    let stream = std::net::TcpStream::connect(addr).unwrap();
    let mut client = Client::new(FramedStream::new(stream));
    let req = Requirements {
        model_id: endpoint.model_id(),
        ..fig2_scenario().requirements
    };
    let p = client.fetch(&req).unwrap();
    assert_eq!(p.achievable().unwrap().kept_units, 4);
    assert_eq!(client.upgrade(UpgradeTarget::Units(12)).unwrap(), 12);
    let partial = client.into_partial().unwrap();
    assert!(partial.model().params().values_bitwise_eq(endpoint.model().params()));
    server.join().unwrap().unwrap();
}

#[test]
fn unknown_model_is_remote_not_found() {
    let endpoint = fig2_endpoint();
    let transport = LoopbackTransport::new(&endpoint, fig2_scenario().link, false);
    let mut client = Client::new(transport);
    let req = Requirements {
        model_id: [7; 16],
        ..fig2_scenario().requirements
    };
    assert!(matches!(client.fetch(&req), Err(Error::Remote { code: code::NOT_FOUND, .. })));
}

#[test]
fn tiny_deadline_is_remote_infeasible() {
    let endpoint = fig2_endpoint();
    let transport = LoopbackTransport::new(&endpoint, fig2_scenario().link, false);
    let mut client = Client::new(transport);
    let req = Requirements {
        deadline_ms: 1,
        ..fig2_scenario().requirements
    };
    assert!(matches!(client.fetch(&req), Err(Error::Remote { code: code::INFEASIBLE, .. })));
}

#[test]
fn truncated_frame_reports_eof_or_error() {
    let msg = Message::TransferDone { n: 3 };
    let bytes = msg.encode();
    let mut r = &bytes[..bytes.len() - 1];
    assert!(read_frame(&mut r).is_err());
    let mut empty: &[u8] = &[];
    assert!(read_frame(&mut empty).unwrap().is_none());
}

#[test]
fn scenario_toml_round_trip() {
    let s = fig2_scenario();
    let text = toml::to_string(&s).unwrap();
    assert_eq!(toml::from_str::<Scenario>(&text).unwrap(), s);
}

proptest! {
    #[test]
    fn transfer_time_is_ceiling(bps in 1u64..100_000_000_000, bits in 0u64..10_000_000_000, rtt in 0u64..1_000_000_000) {
        let link = LinkModel { throughput_bps: bps, rtt_ns: rtt };
        let t = link.transfer_time(bits).as_nanos();
        let exact = bits as u128 * 1_000_000_000;
        let ser = t - rtt as u128;
        prop_assert!(ser * bps as u128 >= exact);
        prop_assert!(ser == 0 || (ser - 1) * (bps as u128) < exact);
    }

    #[test]
    fn requests_round_trip(deadline in any::<u32>(), bps in any::<u64>(), err in prop::option::of(0.0f64..1.0), id in any::<[u8; 16]>()) {
        let m = Message::ModelRequest { model_id: id, scheme: Scheme::BlockCoML, deadline_ms: deadline, throughput_bps: bps, max_error: err };
        let frame = m.encode();
        prop_assert_eq!(u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 4);
        prop_assert_eq!(Message::decode(&frame).unwrap(), m);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = Message::decode(&bytes);
        let _ = read_frame(&mut &bytes[..]);
    }
}

#[test]
fn minimal_scenario_file_parses() {
    let text = r#"
upgrades = [{ units = 12 }]

[link]
throughput_bps = 240000000
rtt_ns = 0

[requirements]
scheme = "coml"
deadline_ms = 200
throughput_bps = 240000000
"#;
    assert_eq!(toml::from_str::<Scenario>(text).unwrap(), fig2_scenario());
}
