use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rdiqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdiqkd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn keyrate_positive_without_loss() {
    let v = json_of(&rdiqkd(&["keyrate", "--n", "2", "--theta", "1.2", "--eta", "1", "--json"]));
    let r = &v["report"];
    assert_eq!(r["status"], "optimal");
    assert!(r["keyrate_raw"].as_f64().unwrap() > 0.1);
    let pg = r["pg_upper"].as_f64().unwrap();
    assert!(pg >= r["attack"]["pg_lower"].as_f64().unwrap() - 1e-6);
}

#[test]
fn orthogonal_states_give_no_key() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(
        dir.path(),
        "id.json",
        r#"{"n": 2, "entries": [[[1,0],[0,0]],[[0,0],[1,0]]]}"#,
    );
    let v = json_of(&rdiqkd(&["keyrate", "--gram", &g, "--eta", "0.9", "--json"]));
    assert!(v["report"]["keyrate_raw"].as_f64().unwrap() <= 1e-6);
    assert_eq!(v["input"]["gram_file"], g.as_str());
}

#[test]
fn zero_transmission_is_no_raw_key() {
    let v = json_of(&rdiqkd(&["keyrate", "--n", "3", "--theta", "0.6", "--eta", "0", "--json"]));
    assert_eq!(v["report"]["status"], "no_raw_key");
    assert_eq!(v["report"]["keyrate_clipped"].as_f64(), Some(0.0));
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["keyrate".into(), "--n".into(), "2".into(), "--theta".into(), "1".into()],
        vec!["keyrate".into(), "--n".into(), "2".into(), "--theta".into(), "1".into(), "--eta".into(), "1.5".into()],
        vec!["attack".into(), "--kind".into(), "usd".into(), "--d".into(), "0.5".into()],
        vec!["attack".into(), "--kind".into(), "magic".into(), "--eta".into(), "0.5".into()],
        vec!["gram".into(), "--mode".into(), "average".into(), "--n".into(), "2".into()],
        vec![
            "keyrate".into(),
            "--config".into(),
            write(dir.path(), "bad.conf", "[protocol]\nsize = 2\n"),
        ],
    ];
    for args in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = rdiqkd(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
    }
}

#[test]
fn both_gram_sources_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "g.json", r#"{"n": 2, "entries": [[[1,0],[0.5,0]],[[0.5,0],[1,0]]]}"#);
    let out = rdiqkd(&["keyrate", "--gram", &g, "--theta", "1", "--eta", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "g.json", r#"{"n": 2, "entries": [[[1,0],[0.5,0]],[[0.5,0],[1,0]]]}"#);
    let conf = write(dir.path(), "run.conf", "[channel]\neta = 0.5\n[gram]\nfile = g.json\n");
    let a = json_of(&rdiqkd(&["keyrate", "--config", &conf, "--json"]));
    assert_eq!(a["input"]["eta"].as_f64(), Some(0.5));
    let b = json_of(&rdiqkd(&["keyrate", "--config", &conf, "--eta", "1", "--json"]));
    assert_eq!(b["input"]["eta"].as_f64(), Some(1.0));
    assert!(b["report"]["keyrate_raw"].as_f64() > a["report"]["keyrate_raw"].as_f64());
}

#[test]
fn scan_csv_is_ordered_and_repeatable() {
    let args = ["scan", "--n", "2", "--theta", "1.1", "--eta-grid", "0.6:1:5", "--jobs", "3"];
    let a = rdiqkd(&args);
    assert!(a.status.success());
    let text = String::from_utf8(a.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "eta,theta,p_succ,qber,pg_upper,keyrate_raw,keyrate_clipped,status");
    assert_eq!(lines.len(), 6);
    let etas: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(etas, vec![0.6, 0.7, 0.8, 0.9, 1.0]);
    let rates: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] > w[0]));
    let b = rdiqkd(&args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn scan_writes_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scan.csv");
    let o = rdiqkd(&[
        "scan", "--n", "3", "--theta", "0.6", "--eta-grid", "0.5,0.9", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn attack_thresholds() {
    let usd = json_of(&rdiqkd(&["attack", "--kind", "usd", "--d", "0.5", "--eta-grid", "0.6,0.9", "--json"]));
    assert!((usd["threshold_eta"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(usd["rows"][0]["pg_lower"].as_f64(), Some(1.0));
    assert!(usd["rows"][1]["pg_lower"].as_f64().unwrap() < 1.0);

    let blind = json_of(&rdiqkd(&["attack", "--kind", "blinding", "--n", "4", "--eta", "0.25", "--json"]));
    assert!((blind["threshold_eta"].as_f64().unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(blind["rows"][0]["pg_lower"].as_f64(), Some(1.0));

    let excl = json_of(&rdiqkd(&[
        "attack", "--kind", "exclusion", "--n", "3", "--theta", "1.5707963267948966", "--eta", "0.9", "--json",
    ]));
    assert!((excl["threshold_eta"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn gram_modes() {
    let exact = json_of(&rdiqkd(&["gram", "--n", "3", "--theta", "0.5"]));
    assert_eq!(exact["n"], 3);
    assert_eq!(exact["entries"][0][0][0].as_f64(), Some(1.0));

    let env = json_of(&rdiqkd(&[
        "gram", "--mode", "envelope", "--n", "2", "--theta-min", "0.9", "--theta-max", "1.1", "--points", "5",
    ]));
    let lo = env["re_lo"][0][1].as_f64().unwrap();
    let hi = env["re_hi"][0][1].as_f64().unwrap();
    assert!(lo < hi);
    // for two states the overlap is cos θ
    assert!((hi - 0.9f64.cos()).abs() < 1e-12);
    assert!((lo - 1.1f64.cos()).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let samples = write(
        dir.path(),
        "s.json",
        r#"{"samples": [
            {"weight": 0.5, "gram": {"n": 2, "entries": [[[1,0],[0.4,0]],[[0.4,0],[1,0]]]}},
            {"weight": 0.5, "gram": {"n": 2, "entries": [[[1,0],[0.6,0]],[[0.6,0],[1,0]]]}}
        ]}"#,
    );
    let avg = json_of(&rdiqkd(&["gram", "--mode", "average", "--samples", &samples]));
    assert!((avg["entries"][0][1][0].as_f64().unwrap() - 0.5).abs() < 1e-12);

    // an envelope file is accepted back as a gram source
    let env_path = dir.path().join("env.json");
    let o = rdiqkd(&["gram", "--mode", "envelope", "--samples", &samples, "--out", env_path.to_str().unwrap()]);
    assert!(o.status.success());
    let v = json_of(&rdiqkd(&["keyrate", "--gram", env_path.to_str().unwrap(), "--eta", "1", "--json"]));
    assert!(v["report"]["pg_upper"].as_f64().unwrap() <= 1.0 + 1e-6);
}

#[test]
fn simulate_is_deterministic() {
    let args = [
        "simulate", "--n", "2", "--theta", "1", "--eta", "0.9", "--rounds", "20000", "--seed", "11", "--shards", "3",
        "--json",
    ];
    let a = rdiqkd(&args);
    let b = rdiqkd(&args);
    assert_eq!(a.stdout, b.stdout);
    let v = json_of(&a);
    assert_eq!(v["summary"]["rounds"], 20000);
    let emp = v["empirical"]["p_succ"].as_f64().unwrap();
    let ana = v["analytic"]["p_succ"].as_f64().unwrap();
    assert!((emp - ana).abs() < 5.0 * (ana * (1.0 - ana) / 20000.0).sqrt());
}

#[test]
fn simulate_transcript_lines() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    let o = rdiqkd(&[
        "simulate", "--n", "2", "--theta", "1", "--eta", "0.9", "--strategy", "usd", "--rounds", "500",
        "--transcript", t.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&t).unwrap();
    assert_eq!(text.lines().count(), 500);
    assert!(text.lines().all(|l| l.split(' ').count() == 9));

    let o = rdiqkd(&[
        "simulate", "--n", "2", "--theta", "1", "--eta", "0.9", "--rounds", "500", "--shards", "2",
        "--transcript", t.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_rejects_attack_below_its_regime() {
    // exclusion needs eta above its threshold to reproduce the honest clicks
    let o = rdiqkd(&["simulate", "--n", "2", "--theta", "1", "--eta", "0.3", "--strategy", "exclusion"]);
    assert_eq!(o.status.code(), Some(1));
}
