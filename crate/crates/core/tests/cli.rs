use std::path::{Path, PathBuf};
use std::process::Command;

use coloc::cli::{run, CliError, EXIT_RUNTIME, EXIT_USAGE};
use coloc::corpus::load_corpus;
use coloc::encoders::{InitScheme, Model, ModelConfig};
use coloc::training::load_checkpoint;

fn coloc(args: &[&str]) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut full = vec!["coloc"];
    full.extend_from_slice(args);
    run(full, &mut out).map(|_| String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    ckpt: PathBuf,
}

fn fixture(epochs: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus");
    let ckpt = root.join("model.ckpt");
    coloc(&["gen-corpus", "--out", s(&corpus), "--images", "40", "--seed", "4"]).unwrap();
    coloc(&[
        "train", "--corpus", s(&corpus), "--out", s(&ckpt), "--epochs", epochs, "--batch", "8", "--seed", "3",
    ])
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        corpus,
        ckpt,
    }
}

fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .to_string()
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = coloc(&["gen-corpus", "--out", s(&a), "--images", "15", "--seed", "9"]).unwrap();
    let ob = coloc(&["gen-corpus", "--out", s(&b), "--images", "15", "--seed", "9"]).unwrap();
    assert_eq!(field(&oa, "checksum"), field(&ob, "checksum"));
    assert_eq!(field(&oa, "images"), "15");
    for f in ["annotations.txt", "vocab.txt", "manifest.txt", "images/0.ten", "images/14.ten"] {
        assert!(a.join(f).is_file(), "{f}");
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let oc = coloc(&["gen-corpus", "--out", s(&dir.path().join("c")), "--images", "15", "--seed", "10"]).unwrap();
    assert_ne!(field(&oa, "checksum"), field(&oc, "checksum"));
}

#[test]
fn gen_corpus_rejects_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let e = coloc(&["gen-corpus", "--out", s(dir.path()), "--images", "0", "--seed", "1"]).unwrap_err();
    assert_eq!(e.code, EXIT_USAGE);
}

#[test]
fn zero_epoch_checkpoint_holds_initial_parameters() {
    let f = fixture("0");
    let state = load_checkpoint(&f.ckpt).unwrap();
    let corpus = load_corpus(&f.corpus).unwrap();
    let init = Model::init(&ModelConfig::desk(corpus.vocab.len()), 3, InitScheme::FanInUniform).unwrap();
    assert_eq!(state.model, init);
    assert_eq!(state.epoch, 0);
    let log = std::fs::read_to_string(f.root.join("model.ckpt.metrics.tsv")).unwrap();
    assert!(log.is_empty());
}

#[test]
fn training_usage_errors() {
    let f = fixture("0");
    let out = s(&f.root).to_string() + "/x.ckpt";
    for bad in [
        vec!["--loss", "bogus"],
        vec!["--lr", "-1"],
        vec!["--batch", "1"],
        vec!["--momentum", "1.0"],
        vec!["--mining", "softest", "--loss", "triplet"],
    ] {
        let mut args = vec!["train", "--corpus", s(&f.corpus), "--out", &out];
        args.extend(bad.iter().copied());
        assert_eq!(coloc(&args).unwrap_err().code, EXIT_USAGE, "{bad:?}");
    }
}

#[test]
fn config_file_with_flag_overrides() {
    let f = fixture("0");
    let cfg = f.root.join("train.cfg");
    let ckpt = f.root.join("cfg.ckpt");
    std::fs::write(
        &cfg,
        format!(
            "# training run\ncorpus = {}\nout = {}\nepochs = 5\nbatch = 8\nseed = 3\n",
            s(&f.corpus),
            s(&ckpt)
        ),
    )
    .unwrap();
    coloc(&["train", "--config", s(&cfg), "--epochs", "1"]).unwrap();
    assert_eq!(load_checkpoint(&ckpt).unwrap().epoch, 1);

    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let e = coloc(&["train", "--config", s(&cfg), "--corpus", s(&f.corpus), "--out", s(&ckpt)]).unwrap_err();
    assert_eq!(e.code, EXIT_USAGE);
    assert!(e.message.contains("unknown key"), "{}", e.message);
}

#[test]
fn eval_reports_pointing_and_retrieval() {
    let f = fixture("1");
    let report = f.root.join("queries.tsv");
    let word = coloc(&[
        "eval", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus), "--split", "all", "--task", "pointing",
        "--parse-mode", "word", "--report", s(&report),
    ])
    .unwrap();
    let phrase = coloc(&[
        "eval", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus), "--split", "all", "--task", "pointing",
        "--parse-mode", "phrase",
    ])
    .unwrap();
    let row = |out: &str| out.lines().nth(1).unwrap().split('\t').map(str::to_string).collect::<Vec<_>>();
    let (w, p) = (row(&word), row(&phrase));
    assert_eq!(w[3], p[3], "same query count");
    let acc: f64 = w[4].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let lines = std::fs::read_to_string(&report).unwrap();
    assert_eq!(lines.lines().count(), w[3].parse::<usize>().unwrap());
    assert!(lines.lines().all(|l| l.ends_with("hit") || l.ends_with("miss")));

    let ret = coloc(&[
        "eval", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus), "--split", "all", "--task", "retrieval", "--k", "1,5,10",
    ])
    .unwrap();
    for dir in ["image-to-caption", "caption-to-image"] {
        let vals: Vec<f64> = ret
            .lines()
            .filter(|l| l.contains(dir))
            .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(vals.len(), 3);
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2], "{vals:?}");
    }
}

#[test]
fn eval_errors() {
    let f = fixture("0");
    let missing = f.root.join("missing.ckpt");
    let e = coloc(&["eval", "--ckpt", s(&missing), "--corpus", s(&f.corpus)]).unwrap_err();
    assert_eq!(e.code, EXIT_RUNTIME);
    for bad in [["--task", "captioning"], ["--parse-mode", "chunk"], ["--split", "dev"]] {
        let mut args = vec!["eval", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus)];
        args.extend(bad);
        assert_eq!(coloc(&args).unwrap_err().code, EXIT_USAGE, "{bad:?}");
    }
    let e = coloc(&[
        "eval", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus), "--task", "retrieval", "--k", "1,500",
    ])
    .unwrap_err();
    assert_eq!(e.code, EXIT_USAGE);
}

#[test]
fn render_writes_one_pair_per_span_deterministically() {
    let f = fixture("1");
    let corpus = load_corpus(&f.corpus).unwrap();
    let cap = corpus.captions().find(|c| c.spans.len() == 3).expect("a three-span caption");
    let id = cap.caption_id.to_string();
    let a = f.root.join("ra");
    let b = f.root.join("rb");
    for out in [&a, &b] {
        coloc(&[
            "render", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus), "--caption-id", &id, "--out", s(out),
            "--mask-quantile", "0.9",
        ])
        .unwrap();
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let want: Vec<String> = (0..3)
        .flat_map(|k| [format!("{id}_{k}.pbm"), format!("{id}_{k}.pgm")])
        .collect();
    assert_eq!(names, want);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    for k in 0..3 {
        let pbm = std::fs::read_to_string(a.join(format!("{id}_{k}.pbm"))).unwrap();
        assert!(pbm.starts_with("P1\n32 32\n"));
        let ones = pbm.lines().skip(2).flat_map(|l| l.split(' ')).filter(|t| *t == "1").count();
        assert!((ones as i64 - 103).abs() <= 1, "{ones}");
        let pgm = std::fs::read_to_string(a.join(format!("{id}_{k}.pgm"))).unwrap();
        assert!(pgm.starts_with("P2\n32 32\n255\n"));
    }
    let e = coloc(&[
        "render", "--ckpt", s(&f.ckpt), "--corpus", s(&f.corpus), "--caption-id", "999999", "--out", s(&a),
    ])
    .unwrap_err();
    assert_eq!(e.code, EXIT_RUNTIME);
}

#[test]
fn selfcheck_passes_and_names_corrupted_ops() {
    let out = coloc(&["selfcheck", "--points", "3", "--instances", "20"]).unwrap();
    assert!(out.contains("checks passed"));
    assert!(!out.contains("FAIL"));
    let e = coloc(&["selfcheck", "--points", "2", "--instances", "5", "--corrupt-backward", "sigmoid"]).unwrap_err();
    assert_eq!(e.code, EXIT_RUNTIME);
    assert!(e.message.contains("sigmoid"), "{}", e.message);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_coloc");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["selfcheck", "--points", "1", "--instances", "2"]), Some(0));
    assert_eq!(code(&["train", "--loss", "bogus"]), Some(1));
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["eval", "--ckpt", "/nonexistent/x", "--corpus", "/nonexistent/y"]), Some(2));
    assert_eq!(code(&["selfcheck", "--points", "1", "--instances", "2", "--corrupt-backward", "exp"]), Some(2));
}
