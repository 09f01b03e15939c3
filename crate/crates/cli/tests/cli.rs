use std::path::Path;
use std::process::Command;

fn stsketch(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_stsketch"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_stsketch"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SPEC: &str = "dims = [120, 6, 5]\nrank = 2\nseed = 3\n\n[[bursts]]\nt = 95\nmagnitude = 6.0\nduration = 3\n";

#[test]
fn stage_by_stage_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();

    let g = stsketch(d, &["generate", "--spec", "spec.toml", "--out", "full.tns", "--planted", "planted.txt"]);
    assert_eq!(g["dims"], serde_json::json!([120, 6, 5]));

    let t = stsketch(
        d,
        &["train-models", "--input", "full.tns", "--models", "2", "--out", "models.jsonl", "--buckets", "buckets.txt", "--coefficients", "coefficients.json"],
    );
    assert_eq!(t["models"], 2);
    assert_eq!(t["fibers"], 30);
    assert_eq!(std::fs::read_to_string(d.join("buckets.txt")).unwrap().lines().count(), 30);

    let s = stsketch(
        d,
        &[
            "sketch", "--strategy", "adaptive", "--input", "full.tns", "--models", "2", "--xi", "auto", "--drop-rate", "0.5",
            "--pid", "0.7,0.2,0.1", "--train-frac", "0.6", "--seed", "0", "--output", "sketch.tns", "--mask", "mask.txt",
            "--log", "samples.csv", "--online", "online.tns",
        ],
    );
    let drop = s["drop_rate"].as_f64().unwrap();
    assert!((drop - 0.5).abs() <= 0.1, "{drop}");
    let log = std::fs::read_to_string(d.join("samples.csv")).unwrap();
    assert!(log.starts_with("t,E_t,gamma,interval\n"));

    let dec = stsketch(
        d,
        &["decompose", "--input", "sketch.tns", "--mask", "mask.txt", "--rank", "2", "--rho", "0.1", "--coefficients", "coefficients.json", "--seed", "0", "--out", "factors.txt"],
    );
    assert!(dec["objective"].as_f64().unwrap().is_finite());
    assert!(std::fs::read_to_string(d.join("factors.txt")).unwrap().starts_with("rank 2 dims 48 6 5"));

    stsketch(d, &["complete", "--input", "sketch.tns", "--mask", "mask.txt", "--factors", "factors.txt", "--out", "completed.tns"]);

    stsketch(
        d,
        &["sketch", "--strategy", "fixed", "--interval", "1", "--input", "full.tns", "--models", "2", "--output", "all.tns", "--mask", "all_mask.txt"],
    );
    stsketch(d, &["decompose", "--input", "all.tns", "--mask", "all_mask.txt", "--rank", "2", "--rho", "0", "--out", "reference.txt"]);
    let m = stsketch(
        d,
        &["metrics", "--ref", "reference.txt", "--est", "factors.txt", "--tensor", "online.tns", "--completed", "completed.tns", "--mask", "mask.txt"],
    );
    let fms = m["fms"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&fms));
    assert!(m["tcs"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["matching"].as_array().unwrap().len(), 2);

    let same = stsketch(d, &["metrics", "--ref", "reference.txt", "--est", "reference.txt", "--matching", "optimal"]);
    assert!((same["fms"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(same["tcs"].is_null());

    let r = stsketch(
        d,
        &["sketch", "--strategy", "random", "--keep", "0.3", "--input", "full.tns", "--models", "2", "--seed", "4", "--output", "r.tns", "--mask", "r_mask.txt"],
    );
    assert!(r["drop_rate"].as_f64().unwrap() > 0.4);
}

#[test]
fn calibrate_and_experiment_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    std::fs::write(
        d.join("run.cfg"),
        "synthetic = spec.toml\nxi = auto\nrank = 2\nrho = 0.1\nseeds = 0,1\ndrop_rates = 0.5\noutput = out\n",
    )
    .unwrap();

    let cal = stsketch(d, &["calibrate", "--config", "run.cfg", "--targets", "0,0.5", "--out", "theta.csv"]);
    assert_eq!(cal[0]["theta"], 1.0);
    let half = cal[1]["achieved"].as_f64().unwrap();
    assert!((half - 0.5).abs() <= 0.02, "{half}");
    assert!(std::fs::read_to_string(d.join("theta.csv")).unwrap().starts_with("target,theta,achieved,attained"));

    let e = stsketch(d, &["experiment", "--config", "run.cfg"]);
    assert_eq!(e["runs"], 6);
    let first = std::fs::read(d.join("out/report.json")).unwrap();
    let first_csv = std::fs::read(d.join("out/report.csv")).unwrap();
    stsketch(d, &["experiment", "--config", "run.cfg", "--output", "again"]);
    assert_eq!(first, std::fs::read(d.join("again/report.json")).unwrap());
    assert_eq!(first_csv, std::fs::read(d.join("again/report.csv")).unwrap());
    assert!(d.join("out/timings.csv").exists());

    std::fs::write(d.join("single.cfg"), "synthetic = spec.toml\nrank = 2\nrho = 0\noutput = single\n").unwrap();
    let one = stsketch(d, &["run", "--config", "single.cfg"]);
    assert_eq!(one["runs"], 1);
}

#[test]
fn ingest_counts_events() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("trips.csv"),
        "pickup_datetime,latitude,longitude\n\
         2024-01-01T08:00:00Z,0.05,10.05\n\
         2024-01-01T09:00:00Z,0.05,10.05\n\
         2024-01-02T09:00:00Z,0.25,10.15\n\
         2024-01-02T10:00:00Z,5.0,10.15\n\
         not-a-time,0.1,10.1\n",
    )
    .unwrap();
    let r = stsketch(d, &["ingest", "--csv", "trips.csv", "--grid", "0,0.3,10,10.2,0.1", "--bin", "1d", "--out", "full.tns"]);
    assert_eq!(r["dims"], serde_json::json!([2, 3, 2]));
    assert_eq!(r["accepted"], 3);
    assert_eq!(r["outside_grid"], 1);
    assert_eq!(r["unparseable"], 1);
    let text = std::fs::read_to_string(d.join("full.tns")).unwrap();
    assert!(text.lines().any(|l| l == "0 0 0 2"), "{text}");
}

#[test]
fn bad_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.cfg"), "train_fraction = 2\n").unwrap();
    assert!(fails(d, &["experiment", "--config", "bad.cfg"]).contains("train_fraction"));
    assert!(fails(d, &["decompose", "--input", "missing.tns", "--mask", "m.txt", "--out", "f.txt"]).contains("missing.tns"));
    fails(d, &["sketch", "--strategy", "sideways", "--input", "x", "--output", "y", "--mask", "z"]);
}
