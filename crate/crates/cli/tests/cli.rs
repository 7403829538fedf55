use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn paa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_train(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![
        "train",
        "--out",
        out,
        "--epochs",
        "2",
        "--train-size",
        "192",
        "--test-size",
        "64",
        "--batch-size",
        "64",
        "--probe-size",
        "32",
    ];
    args.extend_from_slice(extra);
    paa(&args)
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_ok(&small_train(&a, &["--seed", "3"]));
    assert_ok(&small_train(&b, &["--seed", "3"]));
    for file in ["metrics.csv", "policy_usage.csv", "epochs.csv", "ckpt_epoch_2.bin"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_ok(&small_train(&run, &[]));
    let metrics = fs::read(run.join("metrics.csv")).unwrap();
    let last = fs::read(run.join("ckpt_epoch_2.bin")).unwrap();
    let ckpt = run.join("ckpt_epoch_1.bin");
    assert_ok(&paa(&[
        "train",
        "--out",
        run.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(fs::read(run.join("ckpt_epoch_2.bin")).unwrap(), last);
}

#[test]
fn resume_rejects_config_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_ok(&small_train(&run, &["--epochs", "1"]));
    let ckpt = run.join("ckpt_epoch_1.bin");
    let out = paa(&[
        "train",
        "--out",
        run.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--epochs",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_run_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("off");
    assert_ok(&small_train(&run, &["--policy", "off"]));
    assert!(run.join("ckpt_epoch_2.bin").exists());
    assert!(run.join("metrics.csv").exists());
}

#[test]
fn missing_cifar_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = paa(&["train", "--dataset", "cifar10", "--data-dir", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(paa(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(paa(&["train", "--patches", "5"]).status.code(), Some(2));
    assert_eq!(paa(&["bench", "--iters", "0"]).status.code(), Some(2));
    assert_eq!(paa(&["nonsense"]).status.code(), Some(2));
    assert_eq!(paa(&["--help"]).status.code(), Some(0));
}

#[test]
fn augment_greedy_is_repeatable_and_lists_every_patch() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_ok(&small_train(&run, &["--epochs", "1"]));
    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        let img = image::RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([(x * 8) as u8, (y * 8) as u8, (i * 80) as u8])
        });
        img.save(images.join(format!("{name}.png"))).unwrap();
    }
    fs::write(images.join("broken.png"), b"not a png").unwrap();
    let ckpt = run.join("ckpt_epoch_1.bin");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out_dir = dir.path().join(format!("out{k}"));
        assert_ok(&paa(&[
            "augment",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--images",
            images.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--mode",
            "greedy",
        ]));
        outputs.push(out_dir);
    }
    for name in ["a", "b", "c"] {
        for ext in ["png", "ops.txt"] {
            let file = format!("{name}.{ext}");
            assert_eq!(
                fs::read(outputs[0].join(&file)).unwrap(),
                fs::read(outputs[1].join(&file)).unwrap()
            );
        }
        let sidecar = fs::read_to_string(outputs[0].join(format!("{name}.ops.txt"))).unwrap();
        assert_eq!(sidecar.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }
    assert!(!outputs[0].join("broken.png").exists());
}

#[test]
fn augment_without_images_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = paa(&[
        "augment",
        "--images",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inspect_reports_fractions_that_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_ok(&small_train(&run, &[]));
    let csv_path = dir.path().join("usage.csv");
    let gc = dir.path().join("gc");
    assert_ok(&paa(&[
        "inspect",
        "--run",
        run.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
        "--gradcam",
        gc.to_str().unwrap(),
        "--image",
        "1",
    ]));
    let mut sums = std::collections::BTreeMap::<(String, String), f64>::new();
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    for row in reader.records() {
        let row = row.unwrap();
        *sums.entry((row[0].to_string(), row[1].to_string())).or_default() += row[3].parse::<f64>().unwrap();
    }
    assert_eq!(
        sums.keys()
            .map(|k| &k.0)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        2
    );
    for (key, s) in sums {
        assert!((s - 1.0).abs() < 1e-6, "{key:?} sums to {s}");
    }
    assert!(gc.join("gradcam_1.png").exists());
    let bins = fs::read_to_string(gc.join("gradcam_1_bins.txt")).unwrap();
    assert_eq!(bins.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn inspect_missing_run_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = paa(&["inspect", "--run", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn selftest_kernels_pass() {
    let out = paa(&["selftest", "--only", "kernel", "--plans", "30"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
}

#[test]
fn selftest_names_an_injected_fault() {
    let out = paa(&[
        "selftest",
        "--only",
        "grad",
        "--instances",
        "2",
        "--inject-fault",
        "conv-backward",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL grad/conv2d")), "{stdout}");
    assert!(
        stdout.lines().filter(|l| l.starts_with("FAIL")).count() == 1,
        "{stdout}"
    );
}

#[test]
fn bench_checks_equality_before_timing() {
    let out = paa(&["bench", "--batch", "8", "--iters", "1", "--patches", "16"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("equality:"));
}
