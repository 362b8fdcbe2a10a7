use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn blockflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockflow"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("blockflow-cli-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn run_gain_sum_prints_four_and_a_half() {
    let o = blockflow(&[
        "run",
        &fixture("gain_sum.diag"),
        "--cycles",
        "1",
        "--csv",
        "-",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "s.out0").unwrap();
    assert_eq!(row[col], "4.5");
    assert_eq!(row[0], "0");
    assert!(lines.next().is_none());
}

#[test]
fn order_prints_the_loop_cluster() {
    let o = blockflow(&["order", &fixture("feedback.diag")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("{2,3}"), "{text}");
    assert!(text.contains("loops: 1"), "{text}");
}

#[test]
fn order_can_dump_residuals() {
    let o = blockflow(&["order", &fixture("feedback.diag"), "--residuals"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("x0 = b2.o0"), "{text}");
    assert!(text.contains("J00 = "), "{text}");
}

#[test]
fn validate_reports_the_unbound_slot() {
    let o = blockflow(&["validate", &fixture("broken.diag")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("s.in1"), "{}", stderr(&o));

    let ok = blockflow(&["validate", &fixture("gain_sum.diag")]);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let syntax = blockflow(&["validate", &fixture("syntax_error.diag")]);
    assert_eq!(syntax.status.code(), Some(1));
    assert!(stderr(&syntax).contains("line 2"), "{}", stderr(&syntax));

    let missing = blockflow(&["run", &fixture("no_such_file.diag")]);
    assert_eq!(missing.status.code(), Some(1));

    let singular = blockflow(&["run", &fixture("singular.diag")]);
    assert_eq!(singular.status.code(), Some(2));
    assert!(
        stderr(&singular).contains("singular Jacobian"),
        "{}",
        stderr(&singular)
    );

    let usage = blockflow(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn run_is_deterministic_per_seed() {
    let args = |seed: &'static str| {
        [
            "run", "FILE", "--cycles", "50", "--csv", "-", "--seed", seed,
        ]
    };
    let file = fixture("noisy.diag");
    let go = |seed| {
        let mut a = args(seed);
        a[1] = &file;
        stdout(&blockflow(&a))
    };
    assert_eq!(go("3"), go("3"));
    assert_ne!(go("3"), go("4"));
    assert_eq!(go("3").lines().count(), 51);
}

#[test]
fn run_writes_csv_files() {
    let dir = scratch("csv");
    let path = dir.join("trace.csv");
    let o = blockflow(&[
        "run",
        &fixture("feedback.diag"),
        "--cycles",
        "3",
        "--csv",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("cycle,c.out0,s.out0,g.out0"));
    assert_eq!(text.lines().nth(3), Some("2,1,2,1"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn codegen_writes_header_and_source() {
    let dir = scratch("codegen");
    let o = blockflow(&[
        "codegen",
        &fixture("feedback.diag"),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let src = std::fs::read_to_string(dir.join("feedback.c")).unwrap();
    assert!(src.contains("int feedback_step(feedback_state *st, const double *in, double *out)"));
    assert!(src.contains("it <= 50"));
    assert!(dir.join("feedback.h").exists());

    let f = blockflow(&[
        "codegen",
        &fixture("function.diag"),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(f.status.code(), Some(1));
    assert!(stderr(&f).contains("Function"), "{}", stderr(&f));
    let _ = std::fs::remove_dir_all(&dir);
}

fn value_of(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .to_string()
}

fn scalar(v: &str) -> f64 {
    v.trim_matches(|c| c == '[' || c == ']').parse().unwrap()
}

#[test]
fn synth_dlqr_scalar_golden() {
    let o = blockflow(&[
        "synth", "dlqr", "--a", "[1]", "--b", "[1]", "--q", "[1]", "--r", "[1]",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!((scalar(&value_of(&text, "P")) - 1.6180340).abs() <= 1e-6);
    assert!((scalar(&value_of(&text, "K")) - 0.6180340).abs() <= 1e-6);
}

#[test]
fn synth_c2d_and_conversions() {
    let o = blockflow(&[
        "synth", "c2d", "--a", "[-1]", "--b", "[1]", "--c", "[1]", "--d", "[0]", "--t", "1",
    ]);
    let text = stdout(&o);
    assert!((scalar(&value_of(&text, "A")) - 0.367879).abs() <= 1e-6);
    assert!((scalar(&value_of(&text, "B")) - 0.632121).abs() <= 1e-6);

    let o = blockflow(&[
        "synth",
        "ss2tf",
        "--a",
        "[0,1;-2,-3]",
        "--b",
        "[0;1]",
        "--c",
        "[1,0]",
        "--d",
        "[0]",
    ]);
    assert_eq!(value_of(&stdout(&o), "den"), "[1,3,2]");

    let o = blockflow(&["synth", "tf2ss", "--num", "[1]", "--den", "[1,3,2]"]);
    assert_eq!(value_of(&stdout(&o), "A"), "[-3,-2;1,0]");

    let bad = blockflow(&[
        "synth", "dlqr", "--a", "[1,x]", "--b", "[1]", "--q", "[1]", "--r", "[1]",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn demos_write_their_traces() {
    let o = blockflow(&["demo", "autofocus", "--cycles", "5", "--seed", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(
        text.lines().next(),
        Some("cycle,sharpness,error,setpoint,motor,true_focus")
    );
    assert_eq!(text.lines().count(), 6);
    assert_eq!(
        text,
        stdout(&blockflow(&[
            "demo",
            "autofocus",
            "--cycles",
            "5",
            "--seed",
            "2"
        ]))
    );

    let o = blockflow(&["demo", "pid", "--cycles", "100", "--variant", "plain"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 101);
}

#[test]
fn net_echo_answers_signed_frames() {
    use blockflow::net::{decode_frame, encode_frame, HmacKey, PayloadCodec};
    use std::net::UdpSocket;
    use std::time::Duration;

    let probe = UdpSocket::bind("127.0.0.1:0").unwrap();
    let port = probe.local_addr().unwrap().port();
    drop(probe);
    let addr = format!("127.0.0.1:{port}");
    let child = Command::new(env!("CARGO_BIN_EXE_blockflow"))
        .args([
            "net-echo", "--listen", &addr, "--key", "6b6579", "--limit", "3",
        ])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let codec = PayloadCodec::standard();
    let key = HmacKey::new(b"key".to_vec());
    let client = UdpSocket::bind("127.0.0.1:0").unwrap();
    client
        .set_read_timeout(Some(Duration::from_millis(200)))
        .unwrap();
    let mut got = 0;
    let mut buf = [0u8; 2048];
    for attempt in 0..100 {
        if got == 3 {
            break;
        }
        let frame = encode_frame(&codec, 7, 1, 1, &[attempt as f64], &key).unwrap();
        client.send_to(&frame, &addr).unwrap();
        if let Ok((n, _)) = client.recv_from(&mut buf) {
            let msg = decode_frame(&codec, &buf[..n], &key, None).unwrap();
            assert_eq!(msg.payload, vec![attempt as f64]);
            got += 1;
        }
    }
    let out = child.wait_with_output().unwrap();
    assert_eq!(got, 3);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("echoed 3"));
}

#[test]
fn net_echo_rejects_bad_keys() {
    let o = blockflow(&["net-echo", "--listen", "127.0.0.1:0", "--key", "zz"]);
    assert_eq!(o.status.code(), Some(1));
}
