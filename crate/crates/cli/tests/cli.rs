use std::path::Path;
use std::process::{Command, Output};

use mapvamp::model::{
    save_model, Activation, GaussianPrior, Layer, LinearLayer, Network, Precision,
};
use nalgebra::{DMatrix, DVector};

fn mapvamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapvamp"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gaussian_model(dir: &Path) -> (String, String) {
    let w1 = DMatrix::from_fn(12, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4);
    let w2 = DMatrix::from_fn(9, 12, |i, j| ((i * 5 + j * 11) % 7) as f64 / 7.0 - 0.45);
    let net = Network::new(
        6,
        GaussianPrior { precision: 1.0 },
        vec![
            Layer::Linear(LinearLayer::new(
                w1,
                DVector::from_element(12, 0.1),
                Precision::Finite(4.0),
            )),
            Layer::Nonlinear {
                activation: Activation::Identity,
                dim: 12,
            },
            Layer::Linear(LinearLayer::new(
                w2,
                DVector::zeros(9),
                Precision::Finite(10.0),
            )),
            Layer::Nonlinear {
                activation: Activation::Identity,
                dim: 9,
            },
        ],
    )
    .unwrap();
    let model = dir.join("gauss.json");
    save_model(&net, &model).unwrap();
    let obs = dir.join("obs.json");
    let y: Vec<String> = (0..9)
        .map(|i| format!("{}", (i as f64 * 0.7).sin()))
        .collect();
    std::fs::write(&obs, format!("{{\"y\": [{}]}}", y.join(","))).unwrap();
    (model.display().to_string(), obs.display().to_string())
}

#[test]
fn oracle_prox_relu() {
    let o = mapvamp(&["oracle", "prox-relu", "--r-prev", "2", "--r-cur", "-1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.5");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(
        mapvamp(&["oracle", "prox-relu", "--r-prev", "two"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(mapvamp(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "instancez = 2\n").unwrap();
    assert_eq!(
        mapvamp(&["experiment", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_one() {
    let o = mapvamp(&[
        "infer",
        "--model",
        "/nonexistent/m.json",
        "--observation",
        "/nonexistent/y.json",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes_on_gaussian_network() {
    let dir = tempfile::tempdir().unwrap();
    let (model, obs) = gaussian_model(dir.path());
    let o = mapvamp(&[
        "verify",
        "--model",
        &model,
        "--observation",
        &obs,
        "--gamma",
        "1",
    ]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().last(), Some("PASS"));
}

#[test]
fn experiment_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "ny_sweep = [40]\ninstances = 2\n[network]\ninput_dim = 5\nhidden = [20]\n[methods]\nbaseline = false\n",
    )
    .unwrap();
    let out = dir.path().join("r.csv");
    let o = mapvamp(&[
        "experiment",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-iters",
        "20",
        "--mc-samples",
        "10000",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("ny,seed,method,layer,half_iter,nmse_db,wall_ms,converged")
    );
    let records = mapvamp::harness::load_csv(&out).unwrap();
    assert!(records
        .iter()
        .any(|r| r.method == mapvamp::harness::Method::Se));
    assert!(stdout(&o).contains("40,mlvamp,"));
}

#[test]
fn gen_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    let s = dir.path().join("s.json");
    let e = dir.path().join("e.json");
    let o = mapvamp(&[
        "gen",
        "--ny",
        "150",
        "--out",
        m.to_str().unwrap(),
        "--signals",
        s.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = mapvamp(&[
        "infer",
        "--model",
        m.to_str().unwrap(),
        "--observation",
        s.to_str().unwrap(),
        "--out",
        e.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&e).unwrap()).unwrap();
    assert_eq!(est["z0"].as_array().unwrap().len(), 20);
    assert!(est["nmse_db"].as_f64().unwrap() < -5.0);
}
