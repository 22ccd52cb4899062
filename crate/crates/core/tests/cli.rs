use std::path::Path;
use std::process::{Command, Output};

use c3ae::codec::BinGrid;
use c3ae::nn::{build, serialize, Architecture};

fn c3ae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3ae"))
        .args(args)
        .output()
        .expect("spawn c3ae")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join(name),
    )
    .unwrap()
}

#[test]
fn analyze_outputs_match_golden_files() {
    for (args, file) in [
        (vec!["analyze", "--arch", "plain"], "analyze_plain.txt"),
        (
            vec!["analyze", "--arch", "plain", "--format", "csv"],
            "analyze_plain.csv",
        ),
        (
            vec!["analyze", "--arch", "full", "--format", "csv"],
            "analyze_full.csv",
        ),
        (
            vec![
                "analyze", "--arch", "full", "--concat", "pooled", "--format", "csv",
            ],
            "analyze_full_pooled.csv",
        ),
    ] {
        let o = c3ae(&args);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(stdout(&o), golden(file), "{args:?}");
    }
}

#[test]
fn golden_plain_csv_has_expected_counts() {
    let text = golden("analyze_plain.csv");
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let params: Vec<u64> = rows[..rows.len() - 1]
        .iter()
        .map(|r| r[4].parse().unwrap())
        .collect();
    assert_eq!(
        params,
        [896, 128, 9248, 128, 9248, 128, 9248, 128, 1056, 6156, 13]
    );
    let total = rows.last().unwrap();
    assert_eq!(total[4], "36377");
    assert_eq!(total[5], "12562816");
}

#[test]
fn encode_matches_golden() {
    let o = c3ae(&["encode", "--age", "68", "--k", "10", "--min", "10", "--max", "80"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), golden("encode_68.txt"));
    assert_eq!(stdout(&o), "0,0,0,0,0,0.2,0.8,0\n");
}

#[test]
fn exit_codes() {
    assert_eq!(c3ae(&["analyze", "--arch", "tiny"]).status.code(), Some(1));
    let err = String::from_utf8(c3ae(&["analyze", "--arch", "tiny"]).stderr).unwrap();
    assert!(err.contains("plain") && err.contains("full"), "{err}");
    assert_eq!(c3ae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(c3ae(&["encode", "-a", "3"]).status.code(), Some(1));
    assert_eq!(c3ae(&["encode", "--age", "500"]).status.code(), Some(1));
    assert_eq!(c3ae(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.c3ae");
    let o = c3ae(&[
        "predict",
        "--model",
        missing.to_str().unwrap(),
        "--image",
        "x.ppm",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let junk = dir.path().join("junk.c3ae");
    std::fs::write(&junk, b"not a model").unwrap();
    let o = c3ae(&["predict", "--model", junk.to_str().unwrap(), "--image", "x.ppm"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_train_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let o = c3ae(&[
        "synth",
        "--count",
        "6",
        "--seed",
        "2",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(data.join("manifest.csv").exists());

    let cfg = d.join("cfg.txt");
    std::fs::write(
        &cfg,
        "preset = phase2\nepochs = 2\nbatch_size = 3\nval_fraction = 0\n",
    )
    .unwrap();
    let model = d.join("m.c3ae");
    let run = |out: &Path| {
        c3ae(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--quiet",
        ])
    };
    assert_eq!(run(&model).status.code(), Some(0));
    let log = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,kl,mae,total,lr,val_mae"));
    assert_eq!(log.lines().count(), 3);

    let again = d.join("again.c3ae");
    assert_eq!(run(&again).status.code(), Some(0));
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(log, std::fs::read_to_string(d.join("again.csv")).unwrap());

    let img = data.join("img_0000.ppm");
    let args = [
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ];
    let first = c3ae(&args);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(stdout(&first), stdout(&c3ae(&args)));
    let text = stdout(&first);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let (whole, frac) = lines[0].split_once('.').unwrap();
    assert!(whole.parse::<i64>().is_ok() && frac.len() == 2);
    let probs: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(probs.len(), 12);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    let bad_cfg = d.join("bad.txt");
    std::fs::write(&bad_cfg, "learning_rate = fast\n").unwrap();
    let o = c3ae(&[
        "train",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        d.join("x.c3ae").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn predict_one_hot_head_prints_bin_value() {
    let dir = tempfile::tempdir().unwrap();
    let grid = BinGrid::default_training();
    let mut model = build(&Architecture::plain()).unwrap();
    model.initialize(0, grid.bins()).unwrap();
    // Zero Feat weights and a bias spike at bin 70 force a one-hot distribution.
    model.param_mut("Feat.weight").unwrap().data_mut().fill(0.0);
    let bias = model.param_mut("Feat.bias").unwrap().data_mut();
    bias.fill(0.0);
    bias[grid.bins().iter().position(|&b| b == 70.0).unwrap()] = 100.0;
    let path = dir.path().join("onehot.c3ae");
    std::fs::write(&path, serialize(&model)).unwrap();

    let img = dir.path().join("face.ppm");
    let face = c3ae::data::synth_dataset(&Default::default())
        .unwrap()
        .remove(0)
        .image;
    c3ae::data::save_ppm(&face, &img).unwrap();

    let mk = |extra: &[&str]| {
        let mut a = vec![
            "predict",
            "--model",
            path.to_str().unwrap(),
            "--image",
            img.to_str().unwrap(),
        ];
        a.extend_from_slice(extra);
        c3ae(&a)
    };
    let o = mk(&[]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().next(), Some("70.00"));
    let o = mk(&[img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("--auto-crop"));
}

#[test]
fn full_model_requires_three_images_or_auto_crop() {
    let dir = tempfile::tempdir().unwrap();
    let grid = BinGrid::default_training();
    let mut model = build(&Architecture::full()).unwrap();
    model.initialize(1, grid.bins()).unwrap();
    let path = dir.path().join("full.c3ae");
    std::fs::write(&path, serialize(&model)).unwrap();
    let img = dir.path().join("face.ppm");
    let face = c3ae::data::synth_dataset(&Default::default())
        .unwrap()
        .remove(0)
        .image;
    c3ae::data::save_ppm(&face, &img).unwrap();
    let p = path.to_str().unwrap();
    let i = img.to_str().unwrap();

    let o = c3ae(&["predict", "--model", p, "--image", i]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("--auto-crop"));
    assert_eq!(
        c3ae(&["predict", "--model", p, "--image", i, "--auto-crop"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        c3ae(&["predict", "--model", p, "--image", i, i, i]).status.code(),
        Some(0)
    );
}
