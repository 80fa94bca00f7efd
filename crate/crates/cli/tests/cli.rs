use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use estsel::distkernel::{pen_delta, PenaltyQuery};
use estsel::io::sig12;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn estsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_estsel")).args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) {
    let body: Vec<String> = rows.iter().map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")).collect();
    fs::write(path, body.join("\n") + "\n").unwrap();
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

#[test]
fn penalty_matches_library() {
    let o = estsel(&["penalty", "--n", "100", "--dim", "5", "--delta", "3"]);
    assert!(o.status.success());
    let v = pen_delta(&PenaltyQuery::new(100, 5, 3.0).unwrap()).unwrap();
    assert!(stdout(&o).contains(&format!("pen_delta {}", sig12(v.pen_delta))));
}

#[test]
fn missing_argument_is_usage_error() {
    let o = estsel(&["penalty", "--dim", "5", "--delta", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn h0_violation_is_structured() {
    let o = estsel(&["penalty", "--n", "100", "--dim", "99", "--delta", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "h0_violation");
}

#[test]
fn varselect_recovers_support() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, p) = (60, 10);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let r: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();
        y.push(vec![3.0 * r[0] - 2.5 * r[3] + 0.5 * gauss(&mut rng)]);
        rows.push(r);
    }
    write_csv(&dir.path().join("x.csv"), &rows);
    write_csv(&dir.path().join("y.csv"), &y);
    let out = dir.path().join("r.json");
    let o = estsel(&[
        "varselect",
        "--design",
        dir.path().join("x.csv").to_str().unwrap(),
        "--response",
        dir.path().join("y.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("chosen support {1,4}"), "{}", stdout(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(r["report"]["chosen"], serde_json::json!([1, 4]));
}

#[test]
fn simultaneous_aggregation_reports_three_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, m) = (40, 4);
    let phis: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| gauss(&mut rng)).collect()).collect();
    let y: Vec<Vec<f64>> = phis.iter().map(|r| vec![0.6 * r[0] + 0.4 * r[2] + 0.3 * gauss(&mut rng)]).collect();
    write_csv(&dir.path().join("d.csv"), &phis);
    write_csv(&dir.path().join("y.csv"), &y);
    let out = dir.path().join("r.json");
    let o = estsel(&[
        "aggregate",
        "--dict",
        dir.path().join("d.csv").to_str().unwrap(),
        "--y",
        dir.path().join("y.csv").to_str().unwrap(),
        "--mode",
        "simultaneous",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    let ids: Vec<&str> = r["report"]["per_candidate"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 3);
    for id in ["Cv", "L", "MS"] {
        assert!(ids.contains(&id));
    }
}

#[test]
fn linsmooth_with_nadaraya_watson() {
    let dir = tempfile::tempdir().unwrap();
    let n = 50;
    let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<Vec<f64>> = x.iter().map(|v| vec![(6.0 * v[0]).sin() + 0.2 * gauss(&mut rng)]).collect();
    write_csv(&dir.path().join("x.csv"), &x);
    write_csv(&dir.path().join("y.csv"), &y);
    let o = estsel(&[
        "linsmooth",
        "--y",
        dir.path().join("y.csv").to_str().unwrap(),
        "--nw-x",
        dir.path().join("x.csv").to_str().unwrap(),
        "--bandwidths",
        "0.01,0.05,0.2,1.0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("chosen nw_h"));
}

#[test]
fn select_problem_file() {
    let dir = tempfile::tempdir().unwrap();
    let y = [1.0, 2.1, 2.9, 4.2, 5.0, 5.8, 7.1, 8.0];
    let ones = vec![1.0; 8];
    let ramp: Vec<f64> = (1..=8).map(|i| i as f64).collect();
    let mean = y.iter().sum::<f64>() / 8.0;
    let prob = serde_json::json!({
        "y": y,
        "scheme": "explicit",
        "spaces": [
            {"id": "const", "vectors": [ones], "delta": 1.0},
            {"id": "line", "vectors": [ones, ramp], "delta": 1.0}
        ],
        "candidates": [
            {"id": "mean", "fitted": vec![mean; 8], "spaces": ["const"]},
            {"id": "ramp", "fitted": ramp, "spaces": ["line"]}
        ]
    });
    let pf = dir.path().join("p.json");
    fs::write(&pf, prob.to_string()).unwrap();
    let o = estsel(&["select", "--problem", pf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("chosen ramp"), "{}", stdout(&o));

    let mut weighted = prob.clone();
    let obj = weighted.as_object_mut().unwrap();
    obj.insert("scheme".into(), "linear".into());
    obj.insert("a".into(), 2.0.into());
    for sp in obj["spaces"].as_array_mut().unwrap() {
        sp.as_object_mut().unwrap().remove("delta");
    }
    fs::write(&pf, weighted.to_string()).unwrap();
    let o = estsel(&["select", "--problem", pf.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_and_bad_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "k = 0.5\n").unwrap();
    let o = estsel(&["--config", bad.to_str().unwrap(), "penalty", "--n", "50", "--dim", "2", "--delta", "1"]);
    assert!(o.status.success());
    let o = estsel(&["--config", bad.to_str().unwrap(), "select", "--problem", "/nonexistent.json"]);
    assert_eq!(o.status.code(), Some(1));
    let unknown = dir.path().join("u.toml");
    fs::write(&unknown, "bogus = 1\n").unwrap();
    let o = estsel(&["--config", unknown.to_str().unwrap(), "penalty", "--n", "50", "--dim", "2", "--delta", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_is_reproducible_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| -> Vec<String> {
        [
            "--jobs", "2", "simulate", "--family", "E3", "--n", "30", "--p", "15", "--rho", "5", "--reps", "4", "--designs",
            "2", "--seed", "7", "--dmax", "6", "--out",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain([out.display().to_string()])
        .collect()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path| {
        let v = args(out);
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        estsel(&refs)
    };
    let oa = run(&a);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let ob = run(&b);
    assert_eq!(oa.stdout, ob.stdout);
    for f in ["rows.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let o = estsel(&["replay", "--report", a.join("summary.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("replay identical"));
}
