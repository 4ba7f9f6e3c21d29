use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segmental::corpus::load_corpus;
use segmental::segmenter::{DecodedSpan, Segmentation};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segmental"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, spec: Value) -> PathBuf {
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.join("corpus");
    let o = run(&["synth", "--spec", path_str(&spec_path), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.json")
}

/// Decode that reproduces the ground truth, one cluster per word type.
fn truth_decode(manifest: &Path, relabel: impl Fn(usize) -> usize) -> Vec<Segmentation> {
    let corpus = load_corpus(manifest).unwrap();
    corpus
        .utterances
        .iter()
        .zip(&corpus.alignments)
        .map(|(u, a)| Segmentation {
            utterance_id: u.utterance_id.clone(),
            spans: a
                .as_ref()
                .unwrap()
                .iter()
                .map(|w| DecodedSpan {
                    start: w.start_frame,
                    end: w.end_frame,
                    cluster: relabel(w.token[1..].parse().unwrap()),
                })
                .collect(),
        })
        .collect()
}

fn write_json(path: &Path, v: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string(v).unwrap()).unwrap();
}

#[test]
fn synth_default_spec_writes_fifty_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = run(&["synth", "--out", path_str(&out)]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(out.join("features")).unwrap().count(), 50);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["synth", "--seed", "11", "--out", path_str(out)]).status.success());
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    for entry in fs::read_dir(a.join("features")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("features").join(&name)).unwrap(),
            fs::read(b.join("features").join(&name)).unwrap()
        );
    }
}

#[test]
fn synth_missing_spec_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--spec", "/nonexistent/spec.json", "--out", path_str(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("spec.json"));
}

#[test]
fn eval_of_ground_truth_is_perfect_and_label_agnostic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), json!({"n_utts": 8}));
    let mut metrics = Vec::new();
    for (name, relabel) in [("plain", 0usize), ("shuffled", 1)] {
        let decode = truth_decode(&manifest, |k| if relabel == 1 { (k * 7 + 3) % 11 } else { k });
        let path = dir.path().join(format!("{name}.json"));
        write_json(&path, &decode);
        let out = dir.path().join(name);
        let o = run(&["eval", "--decode", path_str(&path), "--manifest", path_str(&manifest), "--out", path_str(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("mapping.csv").exists());
        metrics.push(fs::read_to_string(out.join("metrics.json")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let m: Value = serde_json::from_str(&metrics[0]).unwrap();
    assert_eq!(m["wer"], 0.0);
    assert_eq!(m["boundary_f"], 1.0);
    assert_eq!(m["purity"], 1.0);
}

#[test]
fn eval_without_alignment_fails_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), json!({"n_utts": 3}));
    let decode = truth_decode(&manifest, |k| k);
    let mut m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m[1].as_object_mut().unwrap().remove("alignment");
    fs::write(&manifest, m.to_string()).unwrap();
    let path = dir.path().join("decode.json");
    write_json(&path, &decode);
    let o = run(&["eval", "--decode", path_str(&path), "--manifest", path_str(&manifest), "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alignment"));
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = json!({"pipeline": {
        "iterations": 2,
        "embed": {"n_ref": 40, "sigma_k": 0.1},
        "sampler": {"burn_in": 2, "anneal": [{"iterations": 2, "inv_temp": 0.5}, {"iterations": 2, "inv_temp": 1.0}]}
    }});
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn run_rejects_unknown_config_keys_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"pipeline": {"embed": {"sigma": 0.1}}}"#).unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "run", "--config", path_str(&cfg), "--manifest", "/nonexistent/manifest.json",
        "--out", path_str(&out), "--seed", "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn run_requires_a_seed() {
    let o = run(&["run", "--manifest", "m.json", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn both_presets_produce_per_iteration_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), json!({"n_utts": 5}));
    let cfg = small_config(dir.path());
    for preset in ["constrained", "unconstrained"] {
        let out = dir.path().join(preset);
        let o = run(&[
            "run", "--config", path_str(&cfg), "--preset", preset, "--manifest", path_str(&manifest),
            "--out", path_str(&out), "--seed", "3", "--chains", "3",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
        let k = resolved["pipeline"]["gmm"]["k"].as_u64().unwrap();
        assert_eq!(k, if preset == "constrained" { 15 } else { 100 });
        for it in 1..=2 {
            let iter = out.join(format!("iter_{it}"));
            for c in 0..3 {
                assert!(iter.join(format!("decode_chain{c}.json")).exists());
            }
            assert!(!iter.join("decode_chain3.json").exists());
            for f in ["refset.json", "cache.bin", "diagnostics.csv", "metrics.json"] {
                assert!(iter.join(f).exists(), "{f}");
            }
        }
        assert!(String::from_utf8_lossy(&o.stdout).contains("purity"));
    }
}

#[test]
fn embed_then_segment_matches_stagewise_contract() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), json!({"n_utts": 4}));
    let cfg = small_config(dir.path());
    let emb = dir.path().join("emb");
    let o = run(&["embed", "--config", path_str(&cfg), "--manifest", path_str(&manifest), "--out", path_str(&emb), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seg = dir.path().join("seg");
    let o = run(&[
        "segment", "--config", path_str(&cfg), "--manifest", path_str(&manifest), "--out", path_str(&seg),
        "--seed", "5", "--chains", "2", "--cache", path_str(&emb.join("cache.bin")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(seg.join("decode_chain1.json").exists());
    let diag = fs::read_to_string(seg.join("diagnostics.csv")).unwrap();
    // header plus (burn-in + annealed iterations) rows per chain
    assert_eq!(diag.lines().count(), 1 + 2 * (2 + 4));
}
