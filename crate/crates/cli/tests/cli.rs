use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repsim_core::corpus::wav::encode_wav;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_repsim");

const TINY: &str = r#"{
  "seed": 3,
  "corpus.speakers": 3,
  "corpus.utterances_per_speaker": 10,
  "train.hidden": 8,
  "train.epochs": 2,
  "train.batch_size": 8,
  "models": ["apc-fw-rnn", "cpc-within_spk-cnn"],
  "probe.runs": 2,
  "probe.epochs": 2,
  "sweep.count": 3,
  "scale.multipliers": [1, 2],
  "similarity.include_logmel": true,
  "probe.include_logmel": true,
  "grad_check.hidden": 8
}"#;

fn repsim(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("REPSIM_LOG", "error").output().expect("spawn repsim")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write_wavs(dir: &Path) {
    for (s, base) in [("alice", 220.0), ("bob", 330.0), ("carol", 440.0)] {
        let sd = dir.join(s);
        fs::create_dir_all(&sd).unwrap();
        for u in 0..4 {
            let f = base * (1.0 + 0.1 * u as f64);
            let samples: Vec<i16> = (0..4800)
                .map(|i| {
                    let t = i as f64 / 16_000.0;
                    (8000.0 * (2.0 * std::f64::consts::PI * f * t).sin()) as i16
                })
                .collect();
            fs::write(sd.join(format!("u{u}.wav")), encode_wav(&samples, 16_000)).unwrap();
        }
    }
}

/// Runs `args` into two fresh output directories and asserts every file
/// written is identical.
fn assert_reproducible(work: &Path, tag: &str, args: &[&str]) {
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let out = work.join(format!("{tag}-{i}"));
            let mut full: Vec<&str> = args.to_vec();
            let out_s = out.to_str().unwrap().to_string();
            full.extend(["--out", &out_s]);
            let o = repsim(&full);
            assert!(o.status.success(), "{tag} failed: {}", stderr(&o));
            tree(&out)
        })
        .collect();
    assert!(!runs[0].is_empty(), "{tag} wrote nothing");
    assert_eq!(runs[0].keys().collect::<Vec<_>>(), runs[1].keys().collect::<Vec<_>>(), "{tag}: file sets differ");
    for (path, bytes) in &runs[0] {
        assert!(bytes == &runs[1][path], "{tag}: {} differs between runs", path.display());
    }
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let work = TempDir::new().unwrap();
    let w = work.path();
    let cfg = write_config(w, "tiny.json", TINY);
    let cfg = cfg.to_str().unwrap();
    let wavs = w.join("wavs");
    write_wavs(&wavs);

    for cmd in ["synth-corpus", "pretrain", "extract", "similarity", "probe", "scale-study", "grad-check"] {
        assert_reproducible(w, cmd, &[cmd, "--config", cfg]);
    }
    assert_reproducible(w, "featurize", &["featurize", "--config", cfg, "--input", wavs.to_str().unwrap()]);
    assert_reproducible(w, "sweep-fixture", &["sweep-correlate", "--config", cfg, "--fixture", "noise"]);

    let sweep = write_config(
        w,
        "sweep.json",
        r#"{"seed": 4, "corpus.speakers": 6, "corpus.utterances_per_speaker": 12, "train.hidden": 8,
            "train.epochs": 4, "train.batch_size": 8, "models": ["apc-fw-rnn"], "probe.runs": 2,
            "probe.normalize": true, "probe.lr": 0.05, "sweep.count": 4}"#,
    );
    assert_reproducible(w, "sweep-train", &["sweep-correlate", "--config", sweep.to_str().unwrap()]);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let work = TempDir::new().unwrap();
    let w = work.path();
    let cfg = write_config(w, "tiny.json", TINY);
    let dirs: Vec<PathBuf> = ["1", "3"]
        .iter()
        .map(|jobs| {
            let out = w.join(format!("jobs{jobs}"));
            let o = repsim(&[
                "similarity",
                "--config",
                cfg.to_str().unwrap(),
                "--jobs",
                jobs,
                "--out",
                out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            out
        })
        .collect();
    assert_eq!(tree(&dirs[0]), tree(&dirs[1]));
}

#[test]
fn nine_model_heatmap_is_symmetric_with_unit_diagonal() {
    let work = TempDir::new().unwrap();
    let out = work.path().join("hm");
    let cfg = write_config(
        work.path(),
        "grid.json",
        r#"{"seed": 2, "corpus.speakers": 4, "corpus.utterances_per_speaker": 8, "train.hidden": 8,
            "train.epochs": 1, "train.batch_size": 8}"#,
    );
    let o = repsim(&["similarity", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out.join("heatmap.csv"));
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0].len(), 10);
    let v: Vec<Vec<f64>> = rows[1..].iter().map(|r| r[1..].iter().map(|x| x.parse().unwrap()).collect()).collect();
    for i in 0..9 {
        assert!((v[i][i] - 1.0).abs() < 1e-6);
        for j in 0..9 {
            assert_eq!(v[i][j], v[j][i]);
            assert!((0.0..=1.0 + 1e-9).contains(&v[i][j]));
        }
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("heatmap.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["command"], "similarity");
    assert!(json["data"].is_object());
}

#[test]
fn affine_fixture_sweep_is_perfectly_correlated() {
    let work = TempDir::new().unwrap();
    let out = work.path().join("fx");
    let o = repsim(&["sweep-correlate", "--seed", "9", "--fixture", "affine", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out.join("correlation.csv"));
    assert_eq!(rows[0], ["model", "task", "r", "p", "n", "significant"]);
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        assert!((r[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{r:?}");
        assert!(r[3].parse::<f64>().unwrap() < 1e-10);
        assert_eq!(r[4], "20");
        assert_eq!(r[5], "true");
    }
    assert!(out.join("sweep_fixture-affine.csv").exists());
}

#[test]
fn csv_outputs_carry_provenance_header() {
    let work = TempDir::new().unwrap();
    let out = work.path().join("gc");
    let o = repsim(&["grad-check", "--seed", "5", "--models", "mpc-trf", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("grad_check.csv")).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# repsim "), "{first}");
    assert!(first.contains("command=grad-check") && first.contains("seed=5") && first.contains("config_sha256="));
    let rows = csv_rows(&out.join("grad_check.csv"));
    assert_eq!(rows[1][0], "mpc-trf");
    assert_eq!(rows[1][4], "true");
}

#[test]
fn featurize_builds_a_loadable_manifest() {
    let work = TempDir::new().unwrap();
    let wavs = work.path().join("wavs");
    write_wavs(&wavs);
    let feats = work.path().join("feats");
    let o = repsim(&["featurize", "--seed", "1", "--input", wavs.to_str().unwrap(), "--out", feats.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&feats.join("featurize.csv"));
    assert_eq!(rows.len(), 13);
    for r in &rows[1..] {
        assert!(r[0].starts_with(&format!("{}_", r[1])));
        assert!(["alice", "bob", "carol"].contains(&r[1].as_str()));
        // 0.3 s at a 10 ms hop
        assert!((28..=31).contains(&r[2].parse::<usize>().unwrap()), "{r:?}");
    }
    let manifest = repsim_core::corpus::CorpusManifest::load(feats.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    let m = manifest.load_entry(&manifest.entries[0]).unwrap();
    assert_eq!(m.frames.cols(), 80);

    let sim = work.path().join("sim");
    let o = repsim(&[
        "similarity",
        "--seed",
        "1",
        "--manifest",
        feats.join("manifest.jsonl").to_str().unwrap(),
        "--models",
        "apc-fw-rnn,mpc-trf",
        "--hidden",
        "8",
        "--epochs",
        "1",
        "--split",
        "train",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&sim.join("heatmap.csv")).len(), 3);
}

#[test]
fn saved_checkpoints_feed_later_commands() {
    let work = TempDir::new().unwrap();
    let w = work.path();
    let cfg = write_config(w, "tiny.json", TINY);
    let cfg = cfg.to_str().unwrap();
    let pre = w.join("pre");
    let o = repsim(&["pretrain", "--config", cfg, "--out", pre.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = pre.join("apc-fw-rnn/final.ckpt");
    let b = pre.join("cpc-within_spk-cnn/final.ckpt");

    let trained = w.join("trained");
    let loaded = w.join("loaded");
    assert!(repsim(&["similarity", "--config", cfg, "--out", trained.to_str().unwrap()]).status.success());
    let o = repsim(&[
        "similarity",
        "--config",
        cfg,
        "--checkpoint",
        a.to_str().unwrap(),
        "--checkpoint",
        b.to_str().unwrap(),
        "--out",
        loaded.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let strip = |p: PathBuf| csv_rows(&p);
    assert_eq!(strip(trained.join("heatmap.csv")), strip(loaded.join("heatmap.csv")));
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [vec!["frobnicate"], vec!["similarity", "--no-such-flag"], vec!["probe", "--seed", "abc"], vec![]] {
        let o = repsim(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error[usage]"), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(repsim(&["--help"]).status.code(), Some(0));
    assert_eq!(repsim(&["--version"]).status.code(), Some(0));
}

#[test]
fn configuration_errors_exit_with_three() {
    let work = TempDir::new().unwrap();
    let w = work.path();
    let out = w.join("o");
    let out = out.to_str().unwrap();
    let unknown = write_config(w, "unknown.json", r#"{"seed": 1, "train.hiden": 4}"#);
    let garbled = write_config(w, "garbled.json", "{seed: ");
    let cases: Vec<Vec<String>> = vec![
        vec!["similarity".into()],
        vec!["similarity".into(), "--seed".into(), "1".into(), "--models".into(), "apc-sideways".into()],
        vec!["similarity".into(), "--seed".into(), "1".into(), "--measure".into(), "cosine".into()],
        vec!["probe".into(), "--config".into(), unknown.to_str().unwrap().into()],
        vec!["probe".into(), "--config".into(), garbled.to_str().unwrap().into()],
        vec!["probe".into(), "--config".into(), w.join("absent.json").to_str().unwrap().into()],
        vec![
            "extract".into(),
            "--seed".into(),
            "1".into(),
            "--manifest".into(),
            w.join("none.jsonl").to_str().unwrap().into(),
        ],
        vec!["sweep-correlate".into(), "--seed".into(), "1".into(), "--fixture".into(), "sawtooth".into()],
        vec!["featurize".into(), "--seed".into(), "1".into()],
    ];
    for mut args in cases {
        args.extend(["--out".into(), out.into()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = repsim(&refs);
        assert_eq!(o.status.code(), Some(3), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error[config]"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let work = TempDir::new().unwrap();
    let empty = work.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = work.path().join("o");
    let o = repsim(&["featurize", "--seed", "1", "--input", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!stderr(&o).contains('\n') || stderr(&o).lines().count() == 1);
}
