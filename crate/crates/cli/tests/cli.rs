use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use poly_core::corpus::{load_rolls, preprocess, Corpus};
use poly_core::generate::{conditioned_generate, interpolate, latent_for_seed, sample, GenerateOptions};
use poly_core::midi::TrackMap;
use poly_core::model::{ChordVae, ModelConfig};
use poly_core::pca::{embedding_pca, major_triad_embeddings, pitch_embeddings, TRIAD_ROOTS};
use poly_core::pianoroll::GUITAR_PIANO;
use poly_core::training::Trainer;
use poly_core::{metrics, Pianoroll, StructureTensor};

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn poly(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_poly")).args(args).env("POLY_LOG", "error").output().unwrap();
    Output {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(args: &[&str]) -> Output {
    let out = poly(args);
    assert_eq!(out.code, 0, "{args:?}: {}", out.stderr);
    out
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/midi")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn model() -> ChordVae<f64> {
    ChordVae::new(ModelConfig::new(2, 4, 16, 2), 8).unwrap()
}

fn checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("model.ckpt");
    model().to_checkpoint().save(&path).unwrap();
    path
}

fn read_roll(path: &Path) -> Pianoroll {
    Pianoroll::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let expected: &[(&str, &[&str])] = &[
        ("preprocess", &["--in", "--out", "--bars", "[default: 2]"]),
        ("train", &["--in", "--out", "--ckpt", "--steps", "--seed", "[default: 100000]", "[default: 0]"]),
        ("generate", &["--ckpt", "--out", "--n", "--seed", "--threshold", "[default: 1]", "[default: 0.5]"]),
        ("interpolate", &["--ckpt", "--out", "--seed", "--seed-b", "--steps", "--threshold", "[default: 5]"]),
        ("condition", &["--ckpt", "--structure", "--out", "--seed", "--index"]),
        ("metrics", &["--corpus", "--out", "--table"]),
        ("pca", &["--ckpt", "--out", "--mode", "--track", "--components", "[default: triads]", "[default: guitar]"]),
        ("serve", &["--ckpt", "--port", "--threshold", "[default: 8080]"]),
    ];
    for (sub, flags) in expected {
        let out = ok(&[sub, "--help"]);
        for flag in flags.iter().chain(&["--config"]) {
            assert!(out.stdout.contains(flag), "`{sub} --help` lacks {flag}:\n{}", out.stdout);
        }
    }
    let top = ok(&["--help"]);
    for sub in expected.iter().map(|e| e.0) {
        assert!(top.stdout.contains(sub));
    }
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        &["frobnicate"][..],
        &["preprocess", "--out", "x.bin"],
        &["preprocess", "--in", "d", "--out", "x", "--bars", "4"],
        &["interpolate", "--ckpt", "m", "--out", "o", "--steps", "1"],
        &["generate", "--ckpt", "m", "--out", "o", "--n", "many"],
        &[],
    ] {
        let out = poly(args);
        assert_eq!(out.code, 1, "{args:?}");
        assert!(out.stderr.starts_with("ERROR:usage:"), "{args:?}: {}", out.stderr);
    }
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let out = poly(&["generate", "--ckpt", s(&ckpt), "--out", s(dir.path()), "--threshold", "1.5"]);
    assert_eq!(out.code, 1);
    assert!(out.stderr.starts_with("ERROR:usage:"));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = poly(&["preprocess", "--in", s(&missing), "--out", s(&dir.path().join("c.bin"))]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("ERROR:io:"), "{}", out.stderr);

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = poly(&["generate", "--ckpt", s(&junk), "--out", s(dir.path())]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("ERROR:checkpoint:"), "{}", out.stderr);

    let out = poly(&["metrics", "--corpus", s(&missing)]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("ERROR:corpus:"), "{}", out.stderr);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"model": {"width": 3}}"#).unwrap();
    let out = poly(&["preprocess", "--config", s(&cfg), "--in", s(&fixtures()), "--out", s(&dir.path().join("c.bin"))]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("ERROR:config:"), "{}", out.stderr);
}

#[test]
fn preprocess_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("corpus.bin");
    let out = ok(&["preprocess", "--in", s(&fixtures()), "--bars", "2", "--out", s(&out_path)]);
    let (corpus, summary) = preprocess(fixtures(), 2, poly_core::graph::DEFAULT_SIGMA, &TrackMap::default()).unwrap();
    assert!(out.stdout.starts_with(&format!("{} sequences of 2 bars", summary.sequences)), "{}", out.stdout);
    assert_eq!(Corpus::read(&out_path).unwrap(), corpus);
    assert_eq!(fs::read(&out_path).unwrap(), corpus.to_bytes());
}

#[test]
fn generate_is_reproducible_and_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--ckpt", s(&ckpt), "--n", "3", "--seed", "7", "--out", s(&a)]);
    ok(&["generate", "--ckpt", s(&ckpt), "--n", "3", "--seed", "7", "--out", s(&b)]);

    let expected = sample(&model(), 3, 7, &GenerateOptions::default()).unwrap();
    let mids = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "mid").count();
    assert_eq!(mids, 3);
    for (i, g) in expected.iter().enumerate() {
        for ext in ["mid", "json", "structure"] {
            let name = format!("sample_{i:03}.{ext}");
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
        }
        assert_eq!(read_roll(&a.join(format!("sample_{i:03}.json"))), g.pianoroll);
        let st: StructureTensor = serde_json::from_str(&fs::read_to_string(a.join(format!("sample_{i:03}.structure"))).unwrap()).unwrap();
        assert_eq!(st, g.structure);
    }
}

#[test]
fn metrics_output_equals_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let out_dir = dir.path().join("out");
    ok(&["generate", "--ckpt", s(&ckpt), "--n", "4", "--seed", "1", "--out", s(&out_dir)]);
    let report_path = dir.path().join("report.json");
    let out = ok(&["metrics", "--corpus", s(&out_dir), "--out", s(&report_path)]);
    let expected = metrics::report(&load_rolls(&out_dir).unwrap()).unwrap().to_json();
    assert_eq!(out.stdout.trim_end(), expected);
    assert_eq!(fs::read_to_string(&report_path).unwrap(), expected);

    let table = ok(&["metrics", "--in", s(&out_dir), "--table"]);
    assert_eq!(table.stdout, metrics::report(&load_rolls(&out_dir).unwrap()).unwrap().to_table());
}

#[test]
fn condition_on_a_generated_structure_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let gen = dir.path().join("gen");
    ok(&["generate", "--ckpt", s(&ckpt), "--n", "3", "--seed", "5", "--out", s(&gen)]);
    let cond = dir.path().join("cond");
    ok(&["condition", "--ckpt", s(&ckpt), "--seed", "5", "--index", "2", "--structure", s(&gen.join("sample_002.structure")), "--out", s(&cond)]);
    assert_eq!(read_roll(&cond.join("conditioned.json")), read_roll(&gen.join("sample_002.json")));

    // An edited grid goes through the same library call.
    let m = model();
    let mut st = StructureTensor::zeros(2);
    st.set(0, 1, 0, true);
    st.set(1, 3, 8, true);
    let edited = dir.path().join("edited.structure");
    fs::write(&edited, serde_json::to_string(&st).unwrap()).unwrap();
    ok(&["condition", "--ckpt", s(&ckpt), "--seed", "9", "--structure", s(&edited), "--out", s(&cond)]);
    let expected = conditioned_generate(&m, &latent_for_seed(m.d(), 9), &st, &GenerateOptions::default()).unwrap();
    assert_eq!(read_roll(&cond.join("conditioned.json")), expected.pianoroll);

    fs::write(&edited, "[[[0, 1]]]").unwrap();
    let out = poly(&["condition", "--ckpt", s(&ckpt), "--structure", s(&edited), "--out", s(&cond)]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("ERROR:structure:"), "{}", out.stderr);
}

#[test]
fn interpolate_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let out_dir = dir.path().join("interp");
    ok(&["interpolate", "--ckpt", s(&ckpt), "--seed", "3", "--seed-b", "11", "--steps", "4", "--out", s(&out_dir)]);
    let m = model();
    let path = interpolate(&m, &latent_for_seed(m.d(), 3), &latent_for_seed(m.d(), 11), 4, &GenerateOptions::default()).unwrap();
    for (i, g) in path.iter().enumerate() {
        assert_eq!(read_roll(&out_dir.join(format!("interp_{i:03}.json"))), g.pianoroll);
    }
    assert!(!out_dir.join("interp_004.json").exists());
}

#[test]
fn pca_csv_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let m = model();

    let csv = dir.path().join("triads.csv");
    ok(&["pca", "--ckpt", s(&ckpt), "--out", s(&csv)]);
    let roots: Vec<usize> = TRIAD_ROOTS.collect();
    let (labels, rows) = major_triad_embeddings(&m, &roots, GUITAR_PIANO).unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap(), embedding_pca(labels, &rows, 2).unwrap().to_csv());

    ok(&["pca", "--ckpt", s(&ckpt), "--out", s(&csv), "--mode", "pitches", "--components", "3"]);
    let (labels, rows) = pitch_embeddings(&m);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text, embedding_pca(labels, &rows, 3).unwrap().to_csv());
    assert_eq!(text.lines().next().unwrap(), "label,c1,c2,c3");
}

#[test]
fn train_writes_checkpoints_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.bin");
    ok(&["preprocess", "--in", s(&fixtures()), "--out", s(&corpus)]);
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"model": {"d": 8, "layers": 1}, "training": {"batch_size": 4, "lr0": 0.001}, "seed": 4}"#).unwrap();

    let run = dir.path().join("run");
    let out = ok(&["train", "--config", s(&cfg), "--in", s(&corpus), "--out", s(&run), "--steps", "2"]);
    assert!(out.stdout.starts_with("2 updates"), "{}", out.stdout);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let first = Trainer::<f64>::load(run.join("final.ckpt")).unwrap();
    assert_eq!((first.step(), first.model.config().d, first.config.seed, first.config.batch_size), (2, 8, 4, 4));

    // Same seed from the flag instead of the file gives the same run.
    let again = dir.path().join("again");
    fs::write(&cfg, r#"{"model": {"d": 8, "layers": 1}, "training": {"batch_size": 4, "lr0": 0.001}, "seed": 99}"#).unwrap();
    ok(&["train", "--config", s(&cfg), "--in", s(&corpus), "--out", s(&again), "--steps", "2", "--seed", "4"]);
    assert_eq!(fs::read_to_string(again.join("history.csv")).unwrap(), history);

    let resumed = dir.path().join("resumed");
    ok(&["train", "--in", s(&corpus), "--out", s(&resumed), "--ckpt", s(&run.join("final.ckpt")), "--steps", "3"]);
    let t = Trainer::<f64>::load(resumed.join("final.ckpt")).unwrap();
    assert_eq!(t.step(), 3);
    assert_eq!(t.history()[..2], first.history()[..]);

    // The trained checkpoint feeds straight into generation.
    ok(&["generate", "--ckpt", s(&resumed.join("final.ckpt")), "--out", s(&dir.path().join("gen"))]);
}

#[test]
fn serve_reports_a_bad_checkpoint_before_binding() {
    let dir = tempfile::tempdir().unwrap();
    let out = poly(&["serve", "--ckpt", s(&dir.path().join("none.ckpt")), "--port", "0"]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("ERROR:checkpoint:"), "{}", out.stderr);
}
