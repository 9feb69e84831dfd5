use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmprecode"));
    c.arg("--threads").arg("1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mmprecode")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// Two GPS vehicles on a 4x4 array with budgets cut to a few seconds.
const TINY: &str = r#"
seed = 3

[scene]
building_count = 3

[[scene.vehicles]]
has_gps = true
has_rgb = false
has_lidar = false

[[scene.vehicles]]
has_gps = true
has_rgb = false
has_lidar = false

[system]
n_v = 4
n_h = 4
k = 2
snr_db = 20.0
pilot_len = 4

[model]
pilot_width = 16
gps_width = 16
rgb_width = 16
lidar_width = 16
integration = [32]

[training]
epochs = 3
samples = 32
test_samples = 16

[pcsi]
n_c = 10
n_g = 20
teacher_epochs = 2
pcsi_epochs = 2
selector_hidden = [16]
refiner_hidden = 16

[online]
epochs = 2
samples = 16

[[online.joining]]
has_gps = true
has_rgb = false
has_lidar = false

[sweep]
snr_db = [0.0, 20.0]
k = [1, 2]
samples = 4
wmmse_iterations = 20
"#;

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn shipped_configs_validate() {
    for name in ["reference.toml", "toy.toml", "sensing.toml"] {
        let p = configs().join(name);
        let o = run(&["--dry-run", "baselines", "--config", p.to_str().unwrap()]);
        assert!(
            o.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(stdout(&o).contains("valid"));
    }
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("scene.bin");
    let o = run(&[
        "--dry-run",
        "--out",
        out.to_str().unwrap(),
        "scene",
        "generate",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[system]\nwidth = 3\n").unwrap();
    let o = run(&["baselines", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = tiny(dir.path());
    let o = run(&[
        "robustness",
        "--config",
        cfg.to_str().unwrap(),
        "--levels",
        "extreme",
    ]);
    assert_eq!(o.status.code(), Some(2));

    // K disagrees with the number of vehicles.
    let mismatch = dir.path().join("k.toml");
    fs::write(&mismatch, TINY.replace("k = 2", "k = 3")).unwrap();
    let o = run(&["baselines", "--config", mismatch.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn baselines_are_deterministic_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let args = [
        "baselines",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "2",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    let text = stdout(&a);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scheme,K,N,snr_db,seed,sum_rate"));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    // 2 K values x 2 SNRs x 2 seeds x 3 schemes
    assert_eq!(rows.len(), 24);
    for chunk in rows.chunks(3) {
        let rate = |i: usize| chunk[i][5].parse::<f64>().unwrap();
        assert_eq!(chunk[0][0], "mf");
        assert_eq!(chunk[1][0], "zf");
        assert_eq!(chunk[2][0], "wmmse");
        assert!(rate(2) >= rate(1), "{chunk:?}");
    }

    let other = run(&[
        "--seed",
        "99",
        "baselines",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "2",
    ]);
    assert_ne!(other.stdout, a.stdout);
}

#[test]
fn verify_lemma1_reports_each_alpha() {
    let o = run(&[
        "verify-lemma1",
        "--n",
        "16",
        "--m",
        "3",
        "--alpha",
        "1.5,3",
        "--trials",
        "300",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "alpha,bound,violation_rate,mean_error,predicted_mean"
    );
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(f[2] <= 1.0 / f[0]);
        assert!((f[3] - f[4]).abs() < 0.25 * f[4]);
    }
}

#[test]
fn scene_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let gen = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&[
            "--out",
            out.to_str().unwrap(),
            "scene",
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--text",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = gen("a.bin");
    let b = gen("b.bin");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(a.with_extension("json")).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn offline_then_online_with_a_joining_vehicle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let scene = dir.path().join("scene.bin");
    let state = dir.path().join("state");
    let o = run(&[
        "--out",
        scene.to_str().unwrap(),
        "scene",
        "generate",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success());

    let o = run(&[
        "--out",
        state.to_str().unwrap(),
        "train-offline",
        "--scene",
        scene.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.toml",
        "history.csv",
        "summary.json",
        "models/models.json",
    ] {
        assert!(state.join(f).exists(), "missing {f}");
    }

    let o = run(&[
        "update-online",
        "--scene",
        scene.to_str().unwrap(),
        "--state",
        state.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(state.join("online/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["k"], 3);
    assert_eq!(summary["joined"], 1);
    assert_eq!(summary["gradients_from_true_channels"], 0);
    assert!(state.join("online/models/vehicle_2.ckpt").exists());

    let report = run(&["report", state.join("history.csv").to_str().unwrap()]);
    assert!(report.status.success());
}
