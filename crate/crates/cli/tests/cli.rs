use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiersparse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str, docs: &str) -> String {
    ok(&[
        "gen-data", "--seed", seed, "--docs", docs, "--doc-len", "3", "--sent-len", "3", "--classes", "2", "--vocab", "6",
        "--min-distance", "1", "--max-distance", "2", "--out", p(dir),
    ])
}

const MODEL: &str = "model_dim=8\nff_dim=16\nlayers=1\nheads=2\nepochs=2\nlr=0.003\nseed=4\n";

#[test]
fn gen_data_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let summary = gen(&a, "3", "12");
    assert!(summary.contains("docs=12"));
    assert!(summary.contains("src_vocab=13"));
    assert!(summary.contains("tgt_vocab=14"));
    gen(&b, "3", "12");
    gen(&c, "4", "12");
    for f in ["src.txt", "tgt.txt", "src.vocab", "tgt.vocab", "contrastive.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("src.txt")).unwrap(), fs::read(c.join("src.txt")).unwrap());
    let text = fs::read_to_string(a.join("src.txt")).unwrap();
    assert_eq!(text.split("\n\n").count(), 12);
}

#[test]
fn full_pipeline_runs_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, dev) = (tmp.path().join("train"), tmp.path().join("dev"));
    gen(&train, "1", "16");
    gen(&dev, "2", "6");
    let cfg = tmp.path().join("model.cfg");
    fs::write(&cfg, MODEL).unwrap();
    let s1 = tmp.path().join("s1.ckpt");
    let report = ok(&["train", "--stage", "sentence", "--config", p(&cfg), "--train", p(&train), "--dev", p(&dev), "--out", p(&s1)]);
    assert!(report.contains("stage=sentence"));
    assert!(report.contains("epochs=2"));
    // embeddings (13 + 14)·8, encoder 4·64 + 32 + 280, decoder 8·64 + 48 + 280, output 8·14 + 14
    assert!(report.contains("params.total=1750"), "{report}");

    let ctx_cfg = tmp.path().join("ctx.cfg");
    fs::write(&ctx_cfg, "attention=hier-sparse-soft\nintegration=decoder\nsetting=offline\nepochs=1\nlr=0.003\n").unwrap();
    let s2 = tmp.path().join("s2.ckpt");
    let args = ["train", "--stage", "context", "--config", p(&ctx_cfg), "--train", p(&train), "--dev", p(&dev), "--out", p(&s2), "--init", p(&s1)];
    let report = ok(&args);
    assert!(report.contains("stage=context"));
    // context layer: 6·64 + 32 + 280 + 128
    assert!(report.contains("params.trainable=2574"), "{report}");
    let again = tmp.path().join("again.ckpt");
    let mut args2 = args;
    args2[10] = p(&again);
    ok(&args2);
    assert_eq!(fs::read(&s2).unwrap(), fs::read(&again).unwrap());

    let (h1, h2) = (tmp.path().join("h1.txt"), tmp.path().join("h2.txt"));
    let src = dev.join("src.txt");
    ok(&["translate", "--ckpt", p(&s2), "--src", p(&src), "--out", p(&h1), "--iterative"]);
    ok(&["translate", "--ckpt", p(&s2), "--src", p(&src), "--out", p(&h2), "--iterative"]);
    assert_eq!(fs::read(&h1).unwrap(), fs::read(&h2).unwrap());
    let hyp = fs::read_to_string(&h1).unwrap();
    assert_eq!(hyp.lines().count(), fs::read_to_string(&src).unwrap().lines().count());

    let tgt = dev.join("tgt.txt");
    assert_eq!(ok(&["eval-bleu", "--hyp", p(&tgt), "--ref", p(&tgt)]).trim(), "bleu=0.0000");
    assert_eq!(ok(&["eval-bleu", "--hyp", p(&tgt), "--ref", p(&tgt), "--smooth"]).trim(), "bleu=100.0000");
    let bleu = ok(&["eval-bleu", "--hyp", p(&h1), "--ref", p(&dev.join("tgt.txt")), "--smooth"]);
    assert!(bleu.starts_with("bleu="));

    let rep = tmp.path().join("contrastive.txt");
    let out = ok(&["eval-contrastive", "--ckpt", p(&s2), "--items", p(&dev), "--report", p(&rep)]);
    assert_eq!(out, fs::read_to_string(&rep).unwrap());
    assert!(out.contains("overall.count=6"));

    let dump = ok(&["inspect-attn", "--ckpt", p(&s2), "--doc", p(&src), "--tgt", p(&dev.join("tgt.txt")), "--sentence", "1", "--token", "0"]);
    assert!(dump.contains("sentence=1"));
    assert!(dump.contains("head.1.pruned="));
    assert!(dump.contains("mean.rank.0="));

    let err = fails(&["inspect-attn", "--ckpt", p(&s1), "--doc", p(&src), "--sentence", "1", "--token", "0"]);
    assert!(err.contains("hierarchical"), "{err}");
}

#[test]
fn bad_invocations_report_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "1", "4");
    let out = tmp.path().join("x.ckpt");
    let err = fails(&["train", "--stage", "context", "--train", p(&data), "--dev", p(&data), "--out", p(&out)]);
    assert!(err.contains("--init"), "{err}");
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "colour=blue\n").unwrap();
    let err = fails(&["train", "--stage", "sentence", "--config", p(&cfg), "--train", p(&data), "--dev", p(&data), "--out", p(&out)]);
    assert!(err.contains("colour"), "{err}");
    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let err = fails(&["translate", "--ckpt", p(&garbage), "--src", p(&data.join("src.txt")), "--out", p(&out)]);
    assert!(err.starts_with("error:"), "{err}");
    fails(&["gen-data", "--classes", "1", "--out", p(&data)]);
    fails(&["eval-bleu", "--hyp", p(&data.join("src.txt")), "--ref", p(&tmp.path().join("missing"))]);
}
