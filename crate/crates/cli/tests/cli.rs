use std::path::Path;
use std::process::{Command, Output};

fn mapformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapformer"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: &str = r#"
horizons = [3.0]

[synth]
episodes = 1
episode_frames = 60

[data]
val_episodes = 1
max_train_scenes = 2
max_val_scenes = 2

[model]
d_model = 16
n_heads = 2
n_dec = 1
n_gnn = 1
n_modes = 2

[training]
epochs = 1
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_eval_analyze_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", SMALL);
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let an = tmp.path().join("an");
    let (data_s, run_s, an_s) = (
        data.to_str().unwrap(),
        run.to_str().unwrap(),
        an.to_str().unwrap(),
    );

    let o = mapformer(&["generate", "--config", &cfg, "--out", data_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train/tracks.csv").exists() && data.join("val/tracks.csv").exists());

    let o = mapformer(&["train", "--config", &cfg, "--out", run_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = run.join("model.ckpt");
    let ck_s = ck.to_str().unwrap();
    let val = data.join("val");
    let val_s = val.to_str().unwrap();

    let csv = tmp.path().join("metrics.csv");
    let o = mapformer(&[
        "eval",
        "--checkpoint",
        ck_s,
        "--data",
        val_s,
        "--horizon",
        "3",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("minSADE") && stdout.contains("cv"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("model,horizon_s,min_sade,min_sfde,smr,n_scenes\nmapformer,3,"));
    assert_eq!(text.lines().count(), 3);

    let o = mapformer(&["analyze", "--checkpoint", ck_s, "--data", val_s, "--out", an_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(an.join("dependencies.csv").exists());
    assert!(an.join("plots/scene_0000.svg").exists());
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out_s = out.to_str().unwrap();
    let typo = write(tmp.path(), "typo.toml", "[training]\nlrr = 0.1\n");
    assert_eq!(code(&mapformer(&["train", "--config", &typo, "--out", out_s])), 1);
    let bad = write(tmp.path(), "bad.toml", "[training]\nlr = -1.0\n");
    assert_eq!(code(&mapformer(&["train", "--config", &bad, "--out", out_s])), 1);
    assert_eq!(
        code(&mapformer(&[
            "generate",
            "--config",
            "/no/such.toml",
            "--out",
            out_s
        ])),
        1
    );
    assert_eq!(
        code(&mapformer(&[
            "eval",
            "--checkpoint",
            "x",
            "--data",
            "y",
            "--horizon",
            "4"
        ])),
        1
    );
    assert_eq!(code(&mapformer(&["frobnicate"])), 1);
    assert_eq!(code(&mapformer(&["--help"])), 0);
}

#[test]
fn non_finite_training_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "nan.toml",
        &SMALL.replace("epochs = 1", "epochs = 3\nbatch_size = 1\nlr = 1e300"),
    );
    let o = mapformer(&[
        "train",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("o/model.ckpt").exists());
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = mapformer(&["gradcheck"]);
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(code(&o), 0, "{text}");
    let names: Vec<_> = text
        .lines()
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    let mut uniq = names.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), names.len());
    assert!(names.contains(&"model/attention"));

    let o = mapformer(&["gradcheck", "--corrupt-softplus"]);
    assert_eq!(code(&o), 2);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.lines()
            .any(|l| l.starts_with("op/softplus") && l.ends_with("FAIL")),
        "{text}"
    );
}
