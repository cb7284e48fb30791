use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use airgan::air::{load_air, DATASET_LENGTH, DATASET_SAMPLE_RATE};
use airgan::estimation::measure_drr;
use airgan::rep::LowDimRep;
use airgan::segment::mixing_point;

fn airgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small clean corpus plus a config that trains briefly.
fn setup(dir: &Path, per_room: usize) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    ok(airgan(&[
        "corpus",
        "--out",
        s(&corpus),
        "--per-room",
        &per_room.to_string(),
        "--profile",
        "clean",
        "--seed",
        "3",
    ]));
    let config = dir.join("run.toml");
    fs::write(
        &config,
        "count = 4\njobs = 2\n[gan]\nepochs = 3\nbatch_size = 4\nhidden = 16\n",
    )
    .unwrap();
    (corpus.join("manifest.csv"), config)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_writes_the_full_output_tree() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path(), 6);
    let out = dir.path().join("out");
    ok(airgan(&[
        "pipeline",
        "--config",
        s(&config),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--seed",
        "11",
    ]));

    assert!(out.join("effective_config.toml").is_file());
    let effective = fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(effective.contains("seed = 11") && effective.contains("epochs = 3"));

    let summary = fs::read_to_string(out.join("encode_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for room in ["clean_a", "clean_b", "clean_c"] {
        let reps = fs::read_dir(out.join("reps").join(room)).unwrap().count();
        assert_eq!(reps, 6);
        assert!(out.join("banks").join(format!("{room}.bank")).is_file());
        for ext in ["gen.ckpt", "disc.ckpt", "json"] {
            assert!(out.join("models").join(format!("{room}.{ext}")).is_file());
        }
        let history = fs::read_to_string(out.join("models").join(format!("{room}_history.csv"))).unwrap();
        assert_eq!(history.lines().count(), 4);

        for i in 0..4 {
            let gen = out.join("generated").join(room);
            let rep: LowDimRep = fs::read_to_string(gen.join(format!("gen_{i}.rep.csv")))
                .unwrap()
                .parse()
                .unwrap();
            let air = load_air(gen.join(format!("gen_{i}.wav"))).unwrap();
            assert_eq!(air.len(), DATASET_LENGTH);
            assert_eq!(air.sample_rate(), DATASET_SAMPLE_RATE);
            // Direct path at the 17-tap excitation centre.
            let drr = measure_drr(&air, 8.0, mixing_point(8.0, DATASET_SAMPLE_RATE)).unwrap();
            assert!((drr.eta2 / rep.eta2() - 1.0).abs() < 1e-6, "{} vs {}", drr.eta2, rep.eta2());
            if rep.d_count() > 0 {
                assert!((drr.eta1 / rep.eta1() - 1.0).abs() < 1e-6, "{} vs {}", drr.eta1, rep.eta1());
            }
        }
        for kind in ["ks", "hist"] {
            assert!(out.join("stats").join(format!("{room}_{kind}.csv")).is_file());
        }
    }
    let rollup = fs::read_to_string(out.join("stats/rollup.csv")).unwrap();
    assert!(rollup.starts_with("room,real,generated,ks_t60_s"));
    assert_eq!(rollup.lines().count(), 4);
}

#[test]
fn identical_configs_give_identical_trees_and_training_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path(), 5);
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        ok(airgan(&[
            "pipeline",
            "--config",
            s(&config),
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--jobs",
            jobs,
        ]));
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        if x.ends_with("effective_config.toml") {
            continue;
        }
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs", x.display());
    }

    let ckpt = a.join("models/clean_a.gen.ckpt");
    let before = fs::read(&ckpt).unwrap();
    ok(airgan(&[
        "train",
        "--config",
        s(&config),
        "--manifest",
        s(&manifest),
        "--out",
        s(&a),
    ]));
    assert_eq!(fs::read(&ckpt).unwrap(), before);
}

#[test]
fn bad_inputs_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.csv");
    fs::write(&manifest, "path,room,meta\n").unwrap();
    let out = dir.path().join("out");
    let r = airgan(&["encode", "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(!out.exists());

    let (manifest, config) = setup(dir.path(), 3);
    let r = airgan(&[
        "encode",
        "--config",
        s(&config),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--rooms",
        "nowhere",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("nowhere"));

    let r = airgan(&["generate", "--config", s(&config), "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(!airgan(&["pipeline", "--mix-mode", "sideways"]).status.success());
}

#[test]
fn unreadable_files_are_reported_and_the_rest_encoded() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path(), 4);
    let broken = dir.path().join("corpus/clean_a/clean_a_001.wav");
    fs::write(&broken, b"not a wav").unwrap();
    let out = dir.path().join("out");
    let r = airgan(&["encode", "--config", s(&config), "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("clean_a_001"));
    assert_eq!(fs::read_dir(out.join("reps/clean_a")).unwrap().count(), 3);
    assert_eq!(fs::read_dir(out.join("reps/clean_b")).unwrap().count(), 4);
    assert_eq!(fs::read(&broken).unwrap(), b"not a wav");
}

#[test]
fn decode_writes_a_wav_of_the_requested_length() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = setup(dir.path(), 3);
    let out = dir.path().join("out");
    ok(airgan(&["encode", "--config", s(&config), "--manifest", s(&manifest), "--out", s(&out)]));
    let rep = out.join("reps/clean_b/clean_b_000.rep.csv");
    let wav = dir.path().join("decoded.wav");
    for mode in ["verbatim", "continuous"] {
        ok(airgan(&[
            "decode",
            "--rep",
            s(&rep),
            "--bank",
            s(&out.join("banks/clean_b.bank")),
            "--out",
            s(&wav),
            "--mix-mode",
            mode,
            "--seed",
            "5",
            "--length-s",
            "0.5",
        ]));
        let air = load_air(&wav).unwrap();
        assert_eq!(air.len(), 8000);
    }
}
