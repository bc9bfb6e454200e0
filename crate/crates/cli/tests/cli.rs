use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;
use ttt_seg::dataio::{load_dataset, save_dataset};
use ttt_seg::metrics::MetricsReport;
use ttt_seg::tensor::Tensor;

fn ttt_seg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttt-seg"))
        .current_dir(dir)
        .env_remove("TTT_SEG_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

const DESK: &str = r#"{
  "data": {"samples": 10, "seed": 3},
  "train": {"epochs": 2, "batch_size": 2, "network": {"base_channels": 4, "channel_cap": 16}},
  "eval": {"split": "all"}
}"#;

fn desk(tmp: &TempDir) {
    fs::write(tmp.path().join("desk.json"), DESK).unwrap();
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    desk(&tmp);
    for d in ["a", "b"] {
        let o = ttt_seg(tmp.path(), &["gen-data", "--config", "desk.json", "--data-dir", d]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("wrote 10 samples"));
    }
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    let o = ttt_seg(tmp.path(), &["gen-data", "--samples", "1000", "--data-dir", "big"]);
    assert_eq!(code(&o), 0);
    assert_eq!(load_dataset(&tmp.path().join("big")).unwrap().samples.len(), 1000);
}

#[test]
fn invalid_config_exits_2_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    for (args, key) in [
        (vec!["gen-data", "--set", "data.nois_std=0.2"], "data.nois_std"),
        (vec!["gen-data", "--set", "data.num_classes=1"], "data.num_classes"),
        (vec!["train", "--set", "train.lr=-1"], "train.lr"),
        (vec!["train", "--preset", "nope"], "train.preset"),
        (vec!["eval", "--tau=-1"], "eval.tau"),
    ] {
        let o = ttt_seg(tmp.path(), &args);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(stderr(&o).contains(key), "{args:?}: {}", stderr(&o));
    }
    fs::write(tmp.path().join("bad.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = ttt_seg(tmp.path(), &["train", "--config", "bad.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epochz"));
    let o = Command::new(env!("CARGO_BIN_EXE_ttt-seg"))
        .current_dir(tmp.path())
        .env("TTT_SEG_THREADS", "many")
        .args(["gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("TTT_SEG_THREADS"));
}

#[test]
fn train_eval_predict() {
    let tmp = TempDir::new().unwrap();
    desk(&tmp);
    let t = tmp.path();
    assert_eq!(code(&ttt_seg(t, &["gen-data", "--config", "desk.json", "--data-dir", "d"])), 0);
    let o = ttt_seg(t, &["train", "--config", "desk.json", "--data-dir", "d", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(t.join("r/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(t.join("r/checkpoint/manifest.json").exists());

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--config", "desk.json", "--data-dir", "d", "--set", "out_dir=r"];
        args.extend_from_slice(extra);
        let o = ttt_seg(t, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    eval(&["--pgm", "pgm"]);
    let first = fs::read(t.join("r/metrics.json")).unwrap();
    eval(&[]);
    assert_eq!(fs::read(t.join("r/metrics.json")).unwrap(), first, "eval twice");
    assert_eq!(fs::read_dir(t.join("pgm")).unwrap().count(), 10);

    eval(&["--tau", "2.0", "--report", "tau2.json"]);
    let a: MetricsReport = serde_json::from_slice(&first).unwrap();
    let b: MetricsReport = serde_json::from_slice(&fs::read(t.join("tau2.json")).unwrap()).unwrap();
    assert_eq!((a.tau, b.tau), (1.0, 2.0));
    assert_eq!(a.per_class_dsc, b.per_class_dsc);
    assert_eq!(a.mean_dsc, b.mean_dsc);
    assert!(b.mean_nsd >= a.mean_nsd);

    let o = ttt_seg(t, &["predict", "--config", "desk.json", "--data-dir", "d", "--set", "out_dir=r", "--split", "train"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.join("r/predictions").is_dir());

    let o = ttt_seg(t, &["gen-data", "--set", "data.height=32", "--set", "data.width=32", "--data-dir", "small"]);
    assert_eq!(code(&o), 0);
    let o = ttt_seg(t, &["eval", "--data-dir", "small", "--checkpoint", "r/checkpoint", "--split", "all"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint expects"), "{}", stderr(&o));
}

#[test]
fn variants_select_block_placement() {
    let tmp = TempDir::new().unwrap();
    desk(&tmp);
    let t = tmp.path();
    assert_eq!(code(&ttt_seg(t, &["gen-data", "--config", "desk.json", "--data-dir", "d"])), 0);
    for (variant, ttt_stages) in [("enc", 5), ("none", 0), ("bot", 1)] {
        let out = format!("r_{variant}");
        let o = ttt_seg(
            t,
            &["train", "--config", "desk.json", "--data-dir", "d", "--variant", variant, "--epochs", "1", "--out", &out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let manifest = fs::read_to_string(t.join(&out).join("checkpoint/manifest.json")).unwrap();
        let n = (0..5).filter(|s| manifest.contains(&format!("\"enc.{s}.ttt.w0.w\""))).count();
        assert_eq!(n, ttt_stages, "{variant}");
    }
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    desk(&tmp);
    let t = tmp.path();
    assert_eq!(code(&ttt_seg(t, &["gen-data", "--config", "desk.json", "--data-dir", "d"])), 0);
    let mut data = load_dataset(&t.join("d")).unwrap();
    for s in &mut data.samples {
        let mut v = s.image.data().to_vec();
        v[0] = f64::NAN;
        s.image = Tensor::new(s.image.shape().to_vec(), v).unwrap();
    }
    save_dataset(&data, &t.join("d")).unwrap();
    let o = ttt_seg(t, &["train", "--config", "desk.json", "--data-dir", "d", "--out", "r"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged at epoch 1, step 1"), "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let o = ttt_seg(t, &["gradcheck", "--report", "gc.json"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("worst offender"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.join("gc.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 31);

    let o = ttt_seg(t, &["gradcheck", "--only", "ttt_scan"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 1);

    let o = ttt_seg(t, &["gradcheck", "--only", "conv2d", "--only", "add", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("failed: conv2d"), "{}", stderr(&o));
    assert!(stdout(&o).contains("ok   add"));

    assert_eq!(code(&ttt_seg(t, &["gradcheck", "--only", "nothing"])), 2);
    assert_eq!(code(&ttt_seg(t, &["gradcheck", "--inject-fault", "nothing"])), 2);
}

#[test]
fn overfit_then_eval_on_training_split() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = r#"{
      "data": {"samples": 8, "seed": 0},
      "train": {"epochs": 200, "batch_size": 2, "validation": false,
                "network": {"base_channels": 8, "channel_cap": 64}},
      "eval": {"split": "all"}
    }"#;
    fs::write(t.join("overfit.json"), cfg).unwrap();
    assert_eq!(code(&ttt_seg(t, &["gen-data", "--config", "overfit.json"])), 0);
    let o = ttt_seg(t, &["train", "--config", "overfit.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ttt_seg(t, &["eval", "--config", "overfit.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: MetricsReport = serde_json::from_slice(&fs::read(t.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(r.num_cases, 8);
    assert!(r.mean_dsc >= 0.95, "{}", r.mean_dsc);
}
