use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crevnet::io::{load_checkpoint, read_tensor4};
use crevnet::pipeline::ModelParams;

fn crevnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crevnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
# small model for quick runs
height = 8
width = 8
stages = 2x1,2x1
rpm_count = 2
frames_in = 3
frames_out = 2
steps = 3
batch = 2
val_every = 2
val_seqs = 1
seed = 5
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = crevnet(&[
        "generate",
        "--dataset",
        "bouncing",
        "--out",
        s(&data),
        "--seqs",
        "4",
        "--frames",
        "6",
        "--size",
        "8",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<_> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "dataset.txt",
            "seq_00000.crvt",
            "seq_00001.crvt",
            "seq_00002.crvt",
            "seq_00003.crvt"
        ]
    );
    let seq = read_tensor4::<f32>(&data.join("seq_00002.crvt")).unwrap();
    assert_eq!(seq.dims(), [6, 8, 8, 1]);

    // a second generate into the same directory is refused
    let again = crevnet(&[
        "generate",
        "--dataset",
        "bouncing",
        "--out",
        s(&data),
        "--seqs",
        "1",
        "--size",
        "8",
    ]);
    assert!(!again.status.success());

    let cfg = write(dir.path(), "small.cfg", SMALL);
    let out = dir.path().join("run");
    let o = crevnet(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "step,train_mse,val_mse,baseline_mse,peak_activation_elems");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[1].starts_with("0,") && lines[4].starts_with("3,,"));
    let (params, model) = load_checkpoint::<f32>(&out.join("model.ckpt")).unwrap();
    assert_eq!(model.rpm_count, 2);
    assert_ne!(params, ModelParams::seeded(&model, 5).unwrap());

    // same config, same data: byte-identical checkpoint
    let out2 = dir.path().join("run2");
    assert!(
        crevnet(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&out2)])
            .status
            .success()
    );
    assert_eq!(
        fs::read(out.join("model.ckpt")).unwrap(),
        fs::read(out2.join("model.ckpt")).unwrap()
    );
    assert_eq!(csv, fs::read_to_string(out2.join("metrics.csv")).unwrap());

    let pred = dir.path().join("pred");
    let input = data.join("seq_00000.crvt");
    let o = crevnet(&[
        "predict",
        "--ckpt",
        s(&out.join("model.ckpt")),
        "--input",
        s(&input),
        "--steps",
        "2",
        "--out",
        s(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        read_tensor4::<f32>(&pred.join("prediction.crvt")).unwrap().dims(),
        [2, 8, 8, 1]
    );
    for name in ["frame_000.pgm", "frame_001.pgm"] {
        let pgm = fs::read(pred.join(name)).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
    }
}

#[test]
fn verify_zero_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "zero.cfg", "init = zero\n");
    let o = crevnet(&["verify", "--config", &cfg]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}{}", stderr(&o));
    assert!(text.contains("pixel_shuffle          PASS  max 0.000e0"), "{text}");
    assert!(text.contains("all checks passed"));
    let o = crevnet(&["verify", "--config", &cfg, "--precision", "f64"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("verify (f64)"));
}

#[test]
fn bench_mem_reports_equal_peaks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "default.cfg", "");
    let o = crevnet(&["bench-mem", "--config", &cfg, "--depths", "4,16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("coupling_stack"));
    assert!(
        text.contains("reversible coupling_stack peaks equal across depths"),
        "{text}"
    );
    assert_eq!(text.lines().count(), 1 + 4 + 1);
}

#[test]
fn failures_exit_nonzero_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "frames_in = 6\nframes_out = banana\n");
    let o = crevnet(&["verify", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let unknown = write(dir.path(), "unknown.cfg", "colour = blue\n");
    assert!(stderr(&crevnet(&["verify", "--config", &unknown])).contains("line 1"));

    let out = dir.path().join("never");
    let o = crevnet(&[
        "predict",
        "--ckpt",
        "/nonexistent.ckpt",
        "--input",
        "/nonexistent.crvt",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    let o = crevnet(&["generate", "--dataset", "bouncing", "--out", s(&out), "--size", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);

    let o = crevnet(&["generate", "--dataset", "video", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let o = crevnet(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["frames_in", "rpm_count", "backward", "precision"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}
