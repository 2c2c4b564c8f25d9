use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lgdfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgdfm"))
        .args(args)
        .output()
        .expect("run binary")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"{
  "schema_version": 1,
  "name": "cli-smoke",
  "model": { "kind": "preset", "psi": "positive", "marginals": "neg_binomial" },
  "d": 6, "r": 2, "t": 80,
  "replications": 2, "seed": 3,
  "forecast": { "sisr": { "particles": 100, "qmc_points": 256 } },
  "selection": { "r_max": 3, "p_max": 2 }
}"#;

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("config.json");
    fs::write(&cfg, CONFIG).unwrap();

    let sim = d.join("sim");
    let out = lgdfm(&[
        "simulate",
        "--config",
        path(&cfg),
        "--seed",
        "11",
        "--out",
        path(&sim),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let counts = sim.join("counts.csv");
    assert_eq!(fs::read_to_string(&counts).unwrap().lines().count(), 81);

    let model = d.join("model.json");
    let out = lgdfm(&[
        "fit",
        "--data",
        path(&counts),
        "--family",
        "negbin:3",
        "--r",
        "2",
        "--out",
        path(&model),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["params"]["lambda"]["rows"], 6);

    let scores = d.join("rank.csv");
    let out = lgdfm(&[
        "select",
        "--data",
        path(&counts),
        "--family",
        "negbin:3",
        "--target",
        "rank",
        "--methods",
        "ic1,bcv_pc",
        "--max",
        "3",
        "--out",
        path(&scores),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("BCV_PC: r = "));

    let sisr = d.join("sisr.json");
    fs::write(&sisr, r#"{"particles": 100, "qmc_points": 256}"#).unwrap();
    let fc = d.join("fc");
    let out = lgdfm(&[
        "forecast",
        "--data",
        path(&counts),
        "--model",
        path(&model),
        "--config",
        path(&sisr),
        "--horizon",
        "3",
        "--seed",
        "5",
        "--out",
        path(&fc),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let point = fs::read_to_string(fc.join("point_forecast.csv")).unwrap();
    assert_eq!(point.lines().count(), 4);

    let exp = d.join("exp");
    let out = lgdfm(&[
        "--threads",
        "1",
        "experiment",
        "--config",
        path(&cfg),
        "--out",
        path(&exp),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let t2 = fs::read_to_string(exp.join("table2.csv")).unwrap();
    assert!(t2.starts_with("h,rmfe_y,rmfe_z,rmfe_x,sens,sens_last,sens_marginal,n"));
    assert_eq!(t2.lines().count(), 6);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_eq!(lgdfm(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(lgdfm(&["--help"]).status.code(), Some(0));

    let bad = d.join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n3,2.5\n").unwrap();
    let out = lgdfm(&[
        "fit",
        "--data",
        path(&bad),
        "--family",
        "poisson",
        "--r",
        "1",
        "--out",
        path(&d.join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));

    // An explosive transition matrix is a numeric failure, not a data error.
    let model = r#"{
      "schema_version": 1, "layout": "row-major", "d": 2, "r": 1, "p": 1,
      "params": {
        "lambda": {"rows": 2, "cols": 1, "data": [1.0, 0.5]},
        "psi": [{"rows": 1, "cols": 1, "data": [1.5]}],
        "sigma_eps": {"rows": 2, "cols": 2, "data": [0.5, 0.0, 0.0, 0.5]},
        "sigma_eta": {"rows": 1, "cols": 1, "data": [1.0]}
      },
      "marginals": [{"family": "poisson", "lambda": 1.0}, {"family": "poisson", "lambda": 2.0}],
      "r_z": [], "sigma_y": [], "psd_shift": 0.0, "eigenvalues": []
    }"#;
    let mpath = d.join("explosive.json");
    fs::write(&mpath, model).unwrap();
    let counts = d.join("c.csv");
    fs::write(&counts, "a,b\n1,2\n0,3\n2,1\n").unwrap();
    let out = lgdfm(&[
        "forecast",
        "--data",
        path(&counts),
        "--model",
        path(&mpath),
        "--window",
        "3",
        "--out",
        path(&d.join("f")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
