use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gridformer(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridformer"));
    cmd.args(args);
    if let Some(out) = out {
        cmd.arg("--out").arg(out);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn small_preset_profile_reports_its_widths() {
    let o = gridformer(&["profile", "--config", "gridformer-s", "--size", "64", "--depth", "1"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("widths 32/64/128"), "{text}");
    assert!(text.contains("path,params,conv_macs"));
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [&["frobnicate"][..], &["profile", "--nope"], &[]] {
        let o = gridformer(args, None);
        assert!(!o.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    let o = gridformer(&["profile", "--config", "no-such-preset-or-file"], None);
    assert!(!o.status.success());
}

#[test]
fn synth_then_eval_on_identical_pairs_hits_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, "data.train_pairs=2\ndata.test_pairs=3\ndata.size=32\n").unwrap();
    let data = dir.path().join("data");
    let o = gridformer(&["synth", "--seed", "4", "--config", conf.to_str().unwrap()], Some(&data));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(data.join("test/clean")).unwrap().count(), 3);

    let o = gridformer(&["eval", "--data", data.join("test").to_str().unwrap()], None);
    assert!(o.status.success());
    let mean = stdout(&o).lines().last().unwrap().to_string();
    let input_psnr: f64 = mean.split(',').nth(1).unwrap().parse().unwrap();
    assert!(input_psnr < 99.0, "{mean}");

    let test = data.join("test");
    for entry in fs::read_dir(test.join("clean")).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), test.join("degraded").join(entry.file_name())).unwrap();
    }
    let o = gridformer(&["eval", "--data", test.to_str().unwrap()], None);
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert_eq!(last, "mean,99,1,,");
}

#[test]
fn train_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(
        &conf,
        "preset=micro\ndata.train_pairs=2\ndata.size=32\ntrain.batch=1\ntrain.patch=32\ntrain.checkpoint_every=2\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = gridformer(&["train", "--steps", "4", "--config", conf.to_str().unwrap()], Some(&run));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,L_char,L_per,L,lr"));
    assert_eq!(trace.lines().count(), 5);
    assert!(run.join("checkpoints/step_000002.gfck").exists());
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("train.total_steps=4"));

    let img = dir.path().join("in.png");
    let scene = gridformer::data::synth_scene(1, "x", 20, 36);
    gridformer::data::save_image(&scene, &img).unwrap();
    let restored = dir.path().join("restored");
    let o = gridformer(
        &["infer", "--checkpoint", run.join("model.gfck").to_str().unwrap(), img.to_str().unwrap()],
        Some(&restored),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = gridformer::data::load_image(&restored.join("in.png")).unwrap();
    assert_eq!(out.dims(), &[1, 3, 20, 36]);
}

#[test]
fn gradcheck_exits_zero_on_a_passing_subset() {
    let o = gridformer(&["gradcheck", "--seed", "7", "--prefix", "tail.row0"], None);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(" 0 failures"));
    assert!(stdout(&o).contains("ok   tail.row0."));
}

#[test]
fn ablate_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridformer(&["ablate", "--config", "micro", "--size", "32"], Some(dir.path()));
    assert!(o.status.success());
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table, stdout(&o));
    assert!(table.starts_with("study,variant,params"));
}
