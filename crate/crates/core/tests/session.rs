use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::thread;

use entkd::app::{
    read_key_file, read_metrics, record_streams, run_loopback, run_node, KeyRecord, LoopbackReport, Role, SessionConfig,
};
use entkd::physim::SideConfig;
use entkd::privamp::PaBudget;
use entkd::Error;

fn noiseless(duration: f64, seed: u64) -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.session.seed = Some(seed);
    cfg.session.duration = Some(duration);
    cfg.session.metrics_interval = 1.0;
    cfg.source.pair_rate = 6_000.0;
    cfg.source.visibility_hv = 1.0;
    cfg.source.visibility_da = 1.0;
    cfg.alice = SideConfig::ideal();
    cfg.bob = SideConfig { clock_offset: 3_000_000 * 8, clock_drift: 2e-8, ..SideConfig::ideal() };
    cfg
}

fn small_remote(duration: f64, seed: u64) -> SessionConfig {
    let mut cfg = SessionConfig::remote_night(duration, seed);
    cfg.session.cluster_threshold = 2_000;
    cfg
}

fn keys(dir: &Path) -> (Vec<KeyRecord>, Vec<KeyRecord>) {
    (
        read_key_file(&LoopbackReport::alice_keys_path(dir)).unwrap(),
        read_key_file(&LoopbackReport::bob_keys_path(dir)).unwrap(),
    )
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

#[test]
fn noiseless_loopback_has_zero_qber_and_no_discards() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = noiseless(6.0, 3);
    cfg.session.keys = Some(dir.path().join("keys"));
    cfg.session.metrics = Some(dir.path().join("m.csv"));
    let rep = run_loopback(&cfg).unwrap();
    assert!(rep.alice.clusters.len() >= 3, "{:?}", rep.alice.clusters.len());
    assert_eq!(rep.alice.discarded_clusters(), 0);
    assert_eq!(rep.alice.error_fraction(), 0.0);
    assert!(rep.alice.clusters.iter().all(|c| c.verified));
    assert_eq!(rep.alice.lock_epoch.map(|e| e.0), Some(0));
    assert!(rep.metrics.iter().all(|r| r.qber == 0.0));
    let (a, b) = keys(&dir.path().join("keys"));
    assert_eq!(a, b);
    assert_eq!(a.len(), rep.alice.clusters.len());
}

#[test]
fn same_seed_gives_identical_files() {
    let run = |dir: &Path| {
        let mut cfg = small_remote(8.0, 11);
        cfg.session.keys = Some(dir.join("keys"));
        cfg.session.metrics = Some(dir.join("m.csv"));
        run_loopback(&cfg).unwrap();
        (
            std::fs::read(dir.join("keys/alice.etky")).unwrap(),
            std::fs::read(dir.join("keys/bob.etky")).unwrap(),
            std::fs::read(dir.join("m.csv")).unwrap(),
        )
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a1, b1, m1) = run(d1.path());
    let (a2, b2, m2) = run(d2.path());
    assert!(a1.len() > 6);
    assert_eq!(a1, b1);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(m1, m2);
}

#[test]
fn secrecy_ledger_matches_key_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_remote(10.0, 4);
    cfg.session.keys = Some(dir.path().to_path_buf());
    let rep = run_loopback(&cfg).unwrap();
    let (a, _) = keys(dir.path());
    let expected: usize = rep
        .alice
        .clusters
        .iter()
        .filter(|c| c.verified)
        .map(|c| {
            let b = PaBudget::new(c.r, c.eta, c.disclosed).unwrap();
            assert_eq!(b.e, c.e);
            c.r - b.e - c.disclosed
        })
        .sum();
    let on_disk: usize = a.iter().map(|k| k.bits.len()).sum();
    assert_eq!(on_disk, expected);
    assert_eq!(on_disk as u64, rep.alice.secret_bits);
    let size = std::fs::metadata(LoopbackReport::alice_keys_path(dir.path())).unwrap().len() as usize;
    assert_eq!(size, 6 + a.iter().map(|k| 8 + k.bits.len().div_ceil(8)).sum::<usize>());
}

#[test]
fn flipped_bit_is_caught_by_key_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_remote(10.0, 5);
    cfg.session.keys = Some(dir.path().to_path_buf());
    cfg.session.metrics = Some(dir.path().join("m.csv"));
    cfg.faults.flip_bob_bit = vec![1];
    let rep = run_loopback(&cfg).unwrap();
    assert_eq!(rep.alice.mismatched_clusters, 1);
    assert_eq!(rep.bob.mismatched_clusters, 1);
    assert!(!rep.alice.clusters[1].verified);
    let (a, b) = keys(dir.path());
    assert_eq!(a, b);
    assert!(a.iter().all(|k| k.cluster != 1));
    assert_eq!(a.len(), rep.alice.clusters.len() - 1);
    let total: u32 = rep.metrics.iter().map(|r| r.mismatched_clusters).sum();
    assert_eq!(total, 1);
}

#[test]
fn disconnect_keeps_verified_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_remote(10.0, 6);
    cfg.session.keys = Some(dir.path().to_path_buf());
    cfg.faults.bob_disconnect_after = Some(2);
    assert!(matches!(run_loopback(&cfg), Err(Error::ChannelClosed)));
    let (a, b) = keys(dir.path());
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);

    let full = tempfile::tempdir().unwrap();
    cfg.faults.bob_disconnect_after = None;
    cfg.session.keys = Some(full.path().to_path_buf());
    run_loopback(&cfg).unwrap();
    let (fa, _) = keys(full.path());
    assert_eq!(&fa[..2], &a[..]);
}

#[test]
fn zero_event_session_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = noiseless(1.0, 1);
    cfg.source.pair_rate = 0.0;
    cfg.session.metrics = Some(dir.path().join("m.csv"));
    let rep = run_loopback(&cfg).unwrap();
    assert_eq!(rep.alice.epochs, 0);
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(read_metrics(&text).unwrap().is_empty());
}

fn node_pair(
    cfg: &SessionConfig,
) -> (entkd::Result<entkd::app::SessionReport>, entkd::Result<entkd::app::SessionReport>) {
    let addr = free_addr();
    let mut ca = cfg.clone();
    ca.session.peer = Some(addr.clone());
    ca.session.keys = cfg.session.keys.as_ref().map(|d| d.join("alice.etky"));
    let mut cb = ca.clone();
    cb.session.keys = cfg.session.keys.as_ref().map(|d| d.join("bob.etky"));
    cb.session.connect_timeout = 10.0;
    let alice = thread::spawn(move || run_node(&ca, Role::Alice));
    let bob = run_node(&cb, Role::Bob);
    (alice.join().unwrap(), bob)
}

#[test]
fn two_process_mode_matches_loopback() {
    let lo = tempfile::tempdir().unwrap();
    let tcp = tempfile::tempdir().unwrap();
    let mut cfg = small_remote(8.0, 21);
    cfg.session.keys = Some(lo.path().to_path_buf());
    run_loopback(&cfg).unwrap();
    cfg.session.keys = Some(tcp.path().to_path_buf());
    let (a, b) = node_pair(&cfg);
    let (a, b) = (a.unwrap(), b.unwrap());
    assert_eq!(a.secret_bits, b.secret_bits);
    let (la, lb) = keys(lo.path());
    let (ta, tb) = keys(tcp.path());
    assert!(!la.is_empty());
    assert_eq!(la, ta);
    assert_eq!(lb, tb);
}

#[test]
fn recorded_streams_replay_to_the_same_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_remote(6.0, 8);
    cfg.session.keys = Some(dir.path().join("sim"));
    run_loopback(&cfg).unwrap();
    let (pa, pb) = record_streams(&cfg, &dir.path().join("streams")).unwrap();
    cfg.session.alice_stream = Some(pa);
    cfg.session.bob_stream = Some(pb);
    cfg.session.keys = Some(dir.path().join("file"));
    run_loopback(&cfg).unwrap();
    cfg.session.keys = Some(dir.path().join("tcp"));
    std::fs::create_dir_all(dir.path().join("tcp")).unwrap();
    let (a, b) = node_pair(&cfg);
    a.unwrap();
    b.unwrap();
    let (sa, _) = keys(&dir.path().join("sim"));
    let (fa, fb) = keys(&dir.path().join("file"));
    let (ta, tb) = keys(&dir.path().join("tcp"));
    assert!(!sa.is_empty());
    assert_eq!(sa, fa);
    assert_eq!(fa, fb);
    assert_eq!(fa, ta);
    assert_eq!(fb, tb);
}

#[test]
fn absent_peer_is_a_transport_error() {
    let mut cfg = noiseless(1.0, 1);
    cfg.session.peer = Some(free_addr());
    cfg.session.connect_timeout = 0.2;
    assert!(matches!(run_node(&cfg, Role::Bob), Err(Error::Io(_))));
}

#[test]
fn cli_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_entkd");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[session]\nunknown = 3\n").unwrap();
    let st = Command::new(exe).args(["loopback", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(2));

    let good = dir.path().join("good.toml");
    std::fs::write(&good, "[session]\nduration = 2.0\nconnect_timeout = 0.2\n").unwrap();
    let st = Command::new(exe).args(["bob", "--config"]).arg(&good).args(["--peer", &free_addr()]).status().unwrap();
    assert_eq!(st.code(), Some(3));

    let st = Command::new(exe)
        .args(["loopback", "--config"])
        .arg(&good)
        .args(["--seed", "4", "--keys"])
        .arg(dir.path().join("k"))
        .arg("--metrics")
        .arg(dir.path().join("m.csv"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let rows = read_metrics(&std::fs::read_to_string(dir.path().join("m.csv")).unwrap()).unwrap();
    assert!(!rows.is_empty());
    assert!(dir.path().join("k/alice.etky").exists());
}
