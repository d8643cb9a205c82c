use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qkdpass_core::bits::BitString;
use qkdpass_core::config::RunConfig;
use qkdpass_core::exec::Execution;
use qkdpass_core::finite_key::{analyze_block, BoundMode, DecoyTally};
use qkdpass_core::keystore::KeyFile;
use qkdpass_core::pipeline::{run_pass, write_outputs};
use qkdpass_core::relay::{run_relay, OrbitInfo};
use qkdpass_core::source::{SourceClass, SourceParams};

const SHORT: &str = r#"
session_id = 1
[pass]
duration = 20.0
max_elevation = 60.0
[link]
atmospheric_zenith_loss_db = 0.0
[protocol]
block_bits = 100000
bound = "Asymptotic"
[protocol.sift]
packet_bits = 10000
"#;

fn pass_keys(seed: u64, session: u64, dir: &std::path::Path) -> KeyFile {
    let mut cfg = RunConfig::from_toml(SHORT).unwrap();
    cfg.seed = seed;
    cfg.session_id = session;
    let run = run_pass(&cfg, Execution::default()).unwrap();
    assert!(run.succeeded(), "{:?}", run.summary.outcome);
    write_outputs(&run, dir).unwrap();
    let ground = KeyFile::load(&dir.join("keys_ground.bin")).unwrap();
    assert_eq!(ground, KeyFile::load(&dir.join("keys_satellite.bin")).unwrap());
    assert_eq!(ground.total_bits(), run.summary.final_bits);
    ground
}

#[test]
fn two_passes_feed_a_relay() {
    let dir = tempfile::tempdir().unwrap();
    let a = pass_keys(21, 1, &dir.path().join("a"));
    let b = pass_keys(22, 2, &dir.path().join("b"));
    assert!(a.total_bits() > 0 && b.total_bits() > 0);
    let (ka, kb) = (a.concatenated(), b.concatenated());
    let n = ka.len().min(kb.len());
    let msg = BitString::random(n / 2, &mut ChaCha8Rng::seed_from_u64(3));
    let orbit = |id: &str, k: &KeyFile, end| OrbitInfo {
        station_id: id.into(),
        pass_id: k.session_id.to_string(),
        final_bits: k.total_bits() as usize,
        pass_end_s: end,
    };
    let (t, plain) = run_relay(orbit("J", &a, 20.0), orbit("N", &b, 5420.0), &ka, &kb, &msg).unwrap();
    assert_eq!(plain, msg);
    assert!(t.recovered_matches && t.message_matches);
    assert_eq!(t.bits_relayed, n);
}

/// Expected tally of one 500 kbit block on a channel shaped like the
/// reference pass: about 1% QBER with 10% of matched events disclosed.
fn reference_block() -> (DecoyTally, u64) {
    let params = SourceParams::default();
    let (eta, y0, ed) = (1e-3, 1e-6, 0.009);
    let n = 2.8e9;
    let mut t = DecoyTally::default();
    for class in SourceClass::ALL {
        let m = params.class_intensity(class);
        let sent = (n * params.class_probability(class)).round();
        let signal = 1.0 - (-m * eta).exp();
        let click = 1.0 - (1.0 - y0) * (-m * eta).exp();
        let i = class.index();
        t.sent[i] = sent as u64;
        t.detected[i] = (0.5 * sent * click).round() as u64;
        if class != SourceClass::Vacuum {
            t.errors[i] = (0.5 * sent * (ed * signal + 0.5 * (click - signal))).round() as u64;
        }
    }
    let signal: u64 = [SourceClass::SignalX, SourceClass::SignalZ].iter().map(|c| t.detected[c.index()]).sum();
    (t, signal)
}

#[test]
fn reference_shaped_block_lands_in_the_ratio_band() {
    let (tally, signal) = reference_block();
    let key_bits = 500_000;
    assert!(signal > key_bits && (signal as f64) < 1.2 * key_bits as f64);
    let qber = (tally.errors[SourceClass::SignalX.index()] + tally.errors[SourceClass::SignalZ.index()]) as f64
        / signal as f64;
    assert!((0.0076..0.0179).contains(&qber), "{qber}");
    // five 100 kbit packets through the 1% rung
    let lec = 5.0 * 11_200.0;
    let a = analyze_block(0, &tally, &SourceParams::default(), BoundMode::Chernoff { xi: 1e-10 }, key_bits, lec)
        .unwrap();
    let ratio = a.r as f64 / key_bits as f64;
    assert!((0.12..=0.28).contains(&ratio), "ratio {ratio}");
    assert_eq!(a.xi_total, Some(6e-10));
}
