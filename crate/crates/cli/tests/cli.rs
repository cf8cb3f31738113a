use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use ctrace_core::hash::{ElementBytes, UidHash};

const AUTHORITY: &str = env!("CARGO_BIN_EXE_authority");
const CLIENT: &str = env!("CARGO_BIN_EXE_client");
const SIM: &str = env!("CARGO_BIN_EXE_sim");

fn params_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/params"))
}

fn run(bin: &str, args: &[&str]) -> Output {
    Command::new(bin).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn uid(name: &str) -> String {
    ElementBytes::from_uid(name.as_bytes(), UidHash::default()).to_hex()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn start_server(db: &Path, extra: &[&str]) -> (Server, String) {
    let port = free_port();
    let listen = format!("127.0.0.1:{port}");
    let params = params_dir().join("group_1024_160.json");
    let rsa = params_dir().join("rsa_1024.json");
    let mut args = vec![
        "serve",
        "--params",
        params.to_str().unwrap(),
        "--rsa",
        rsa.to_str().unwrap(),
        "--db",
        db.to_str().unwrap(),
        "--listen",
        &listen,
        "--min-interval",
        "0",
    ];
    args.extend_from_slice(extra);
    let child = Command::new(AUTHORITY)
        .args(&args)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    while TcpStream::connect(&listen).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    (Server(child), format!("http://{listen}"))
}

#[test]
fn database_admin_commands() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db.txt");
    let db_arg = db.to_str().unwrap();
    let h = uid("alice");
    let out = run(AUTHORITY, &["add-diagnosis", &h, "--db", db_arg]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "1");
    assert_eq!(stdout(&run(AUTHORITY, &["add-diagnosis", &h, "--db", db_arg])).trim(), "1");

    let import = dir.path().join("import.txt");
    std::fs::write(&import, format!("{}\n{}\n{h}\n", uid("bob"), uid("carol"))).unwrap();
    let out = run(AUTHORITY, &["import-diagnoses", import.to_str().unwrap(), "--db", db_arg]);
    assert_eq!(stdout(&out).trim(), "3");

    let bad = run(AUTHORITY, &["add-diagnosis", "abcd", "--db", db_arg]);
    assert_eq!(bad.status.code(), Some(4));
}

#[test]
fn ca_signature_verifies() {
    let rsa = params_dir().join("rsa_1024.json");
    let out = run(AUTHORITY, &["ca", "--rsa", rsa.to_str().unwrap(), "--peer", &uid("bob")]);
    assert!(out.status.success());
    let sigma = ctrace_core::wire::decode_uint(stdout(&out).trim()).unwrap();
    let key = ctrace_core::rsa::RsaAuthorityKey::load(&rsa).unwrap();
    let peer: ElementBytes = uid("bob").parse().unwrap();
    assert!(key.common().verify(&peer, &sigma).unwrap());
}

#[test]
fn gen_params_writes_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        AUTHORITY,
        &[
            "gen-params",
            "--out-dir",
            dir.path().to_str().unwrap(),
            "--p-bits",
            "512",
            "--q-bits",
            "160",
            "--rsa-bits",
            "512",
            "--test-profile",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g = ctrace_core::group::GroupParams::load(dir.path().join("group_512_160.json")).unwrap();
    assert_eq!(g.p().bits(), 512);
    let k = ctrace_core::rsa::RsaAuthorityKey::load(dir.path().join("rsa_512.json")).unwrap();
    assert_eq!(k.n().bits(), 512);
}

#[test]
fn full_client_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db.txt");
    let db_arg = db.to_str().unwrap();
    let diagnosed = ["p1", "p2", "p3"];
    for d in diagnosed {
        assert!(run(AUTHORITY, &["add-diagnosis", &uid(d), "--db", db_arg]).status.success());
    }
    let feedback_log = dir.path().join("feedback.jsonl");
    let (_server, url) = start_server(&db, &["--feedback-log", feedback_log.to_str().unwrap()]);
    let home = dir.path().join("home");
    let home_arg = home.to_str().unwrap();
    let clock = "1700000000";
    let client = |args: &[&str]| {
        let mut all = vec!["--home", home_arg, "--clock", clock];
        all.extend_from_slice(args);
        run(CLIENT, &all)
    };

    assert!(client(&["init", "--uid", "me"]).status.success());
    let start = "1699990000";
    for peer in ["p1", "p2", "p3", "q1", "q2"] {
        let out = client(&["record-contact", "--peer", &uid(peer), "--start", start, "--duration", "1200"]);
        assert_eq!(stdout(&out).trim(), "recorded");
    }
    let out = client(&["record-contact", "--peer", &uid("q3"), "--start", start, "--duration", "10"]);
    assert_eq!(stdout(&out).trim(), "dropped: below t_min");

    // APSI before signing fails locally as a protocol error.
    let out = client(&["query", "--server", &url, "--protocol", "apsi", "--now"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = client(&["query", "--server", &url, "--protocol", "psica", "--now"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("tier=elevated cardinality=3"), "{}", stdout(&out));

    let out = client(&["sign-contacts", "--ca", &url]);
    assert_eq!(stdout(&out).trim(), "signed 5");
    let out = client(&["query", "--server", &url, "--protocol", "apsi", "--now"]);
    assert!(stdout(&out).contains("cardinality=3"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = client(&["feedback", "--server", &url, "--age-band", "30-39", "--region", "R5"]);
    assert_eq!(stdout(&out).trim(), "feedback skipped: no consent");
    let out = client(&["feedback", "--server", &url, "--consent", "--age-band", "30-39", "--region", "R5"]);
    assert_eq!(stdout(&out).trim(), "feedback acknowledged");
    let log = std::fs::read_to_string(&feedback_log).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"intersection_size\":3"));

    let summary = run(AUTHORITY, &["feedback-summary", feedback_log.to_str().unwrap()]);
    assert_eq!(stdout(&summary), "intersection_size,reports\n3,1\n");

    // The running server picks up database edits.
    assert!(run(AUTHORITY, &["add-diagnosis", &uid("q1"), "--db", db_arg]).status.success());
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let out = client(&["query", "--server", &url, "--now"]);
        if stdout(&out).contains("cardinality=4") {
            break;
        }
        assert!(Instant::now() < deadline, "reload not observed: {}", stdout(&out));
        std::thread::sleep(Duration::from_millis(500));
    }
}

#[test]
fn client_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path().to_str().unwrap();
    let bad_proto = run(CLIENT, &["--home", home, "query", "--server", "http://x", "--protocol", "nope", "--now"]);
    assert_eq!(bad_proto.status.code(), Some(4));

    let ok = run(CLIENT, &["--home", home, "record-contact", "--peer", &uid("z"), "--start", "1", "--duration", "5000", "--clock", "2"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let port = free_port();
    let dead = run(CLIENT, &[
        "--home", home, "--clock", "2", "--timeout-secs", "1", "query", "--server",
        &format!("http://127.0.0.1:{port}"), "--now",
    ]);
    assert_eq!(dead.status.code(), Some(3), "{}", String::from_utf8_lossy(&dead.stderr));

    let zero_window = run(CLIENT, &["--home", home, "--clock", "2", "query", "--server", "http://127.0.0.1:1", "--window", "0"]);
    assert_eq!(zero_window.status.code(), Some(4));
}

#[test]
fn sim_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.json");
    std::fs::write(
        &config,
        r#"{"population": 30, "days": 3, "contacts_per_day": 4.0, "diagnosis_rate": 0.1}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out_path = dir.path().join(format!("out{i}.csv"));
        let out = run(SIM, &[
            "run", "--config", config.to_str().unwrap(), "--seed", "7", "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("0 oracle mismatches"));
        outputs.push(std::fs::read(out_path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(String::from_utf8_lossy(&outputs[0]).lines().count(), 31);
}
