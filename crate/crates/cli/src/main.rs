//! `hiersparse`: synthetic data generation, two-stage training, decoding,
//! and evaluation from the command line.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hiersparse::corpus::{
    generate_contrastive_set, generate_synthetic_docs, load_documents, load_parallel_documents, read_contrastive_items,
    write_contrastive_items, write_parallel_documents, DistanceDistribution, DocumentPair, SyntheticConfig, Vocab,
};
use hiersparse::decode::{iterative_decode, single_pass_decode, DecodeOptions};
use hiersparse::eval::{corpus_bleu, inspect_attention, score_contrastive};
use hiersparse::model::{load_checkpoint, parse_kv, save_checkpoint, Checkpoint, GateMode, Model, ModelConfig, Stage};
use hiersparse::train::{train_context_stage, train_sentence_stage, TrainConfig};

type CliResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser, Debug)]
#[command(name = "hiersparse", about = "Document-level translation with selective hierarchical attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic disambiguation corpus and its contrastive items.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        docs: usize,
        #[arg(long, default_value_t = 6)]
        doc_len: usize,
        #[arg(long, default_value_t = 6)]
        sent_len: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Ordinary source tokens.
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        min_distance: usize,
        #[arg(long, default_value_t = 5)]
        max_distance: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write a checkpoint.
    Train {
        #[arg(long)]
        stage: Stage,
        /// `key=value` lines over model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint (required for the context stage).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write the training report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Greedy translation of a document-delimited source file.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Two-pass decoding (decoder-side models refine pass-1 output).
        #[arg(long)]
        iterative: bool,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
    /// Corpus BLEU-4 of a hypothesis file against a reference file.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, value_name = "REF")]
        r#ref: PathBuf,
        #[arg(long)]
        smooth: bool,
    },
    /// Contrastive accuracy by antecedent distance.
    EvalContrastive {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with src.txt, tgt.txt and contrastive.txt.
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Dump the hierarchical attention of one query token.
    InspectAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Source documents; the one at `--index` is inspected.
        #[arg(long)]
        doc: PathBuf,
        /// Target documents (decoder-side models).
        #[arg(long)]
        tgt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        sentence: usize,
        #[arg(long)]
        token: usize,
    },
}

fn read_vocabs(dir: &Path) -> CliResult<(Vocab, Vocab)> {
    Ok((Vocab::read(&dir.join("src.vocab"))?, Vocab::read(&dir.join("tgt.vocab"))?))
}

fn load_corpus(dir: &Path, src: &Vocab, tgt: &Vocab) -> CliResult<Vec<DocumentPair>> {
    Ok(load_parallel_documents(&dir.join("src.txt"), &dir.join("tgt.txt"), src, tgt)?)
}

fn checkpoint_vocabs(ckpt: &Checkpoint<f64>) -> CliResult<(&Vocab, &Vocab)> {
    match (&ckpt.src_vocab, &ckpt.tgt_vocab) {
        (Some(s), Some(t)) => Ok((s, t)),
        _ => Err("checkpoint carries no vocabularies".into()),
    }
}

fn gen_data(cfg: SyntheticConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let corpus = generate_synthetic_docs(&cfg)?;
    let ids = hiersparse::corpus::synthetic_vocabs(cfg.vocab, cfg.classes).2;
    write_parallel_documents(&corpus.docs, &out.join("src.txt"), &out.join("tgt.txt"), &corpus.src_vocab, &corpus.tgt_vocab)?;
    corpus.src_vocab.write(&out.join("src.vocab"))?;
    corpus.tgt_vocab.write(&out.join("tgt.vocab"))?;
    let items = generate_contrastive_set(&corpus.docs, &corpus.plants, &ids)?;
    let index: Vec<usize> = (0..items.len()).collect();
    write_contrastive_items(&out.join("contrastive.txt"), &items, &index, &corpus.tgt_vocab)?;
    println!("docs={}", corpus.docs.len());
    println!("src_vocab={}", corpus.src_vocab.len());
    println!("tgt_vocab={}", corpus.tgt_vocab.len());
    Ok(())
}

fn apply_config(text: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> CliResult<()> {
    for (k, v) in parse_kv(text)? {
        if !model.set(&k, &v)? && !train.set(&k, &v)? {
            return Err(format!("unknown config key {k:?}").into());
        }
    }
    Ok(())
}

struct TrainArgs {
    stage: Stage,
    config: Option<PathBuf>,
    train: PathBuf,
    dev: PathBuf,
    out: PathBuf,
    init: Option<PathBuf>,
    report: Option<PathBuf>,
}

fn train(a: TrainArgs) -> CliResult<()> {
    let config_text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => String::new(),
    };
    let (src_vocab, tgt_vocab) = read_vocabs(&a.train)?;
    let mut tcfg = TrainConfig::default();
    let (model, report) = match a.stage {
        Stage::Sentence => {
            let mut mcfg = ModelConfig::default();
            apply_config(&config_text, &mut mcfg, &mut tcfg)?;
            mcfg.src_vocab = src_vocab.len();
            mcfg.tgt_vocab = tgt_vocab.len();
            let train_docs = load_corpus(&a.train, &src_vocab, &tgt_vocab)?;
            let dev_docs = load_corpus(&a.dev, &src_vocab, &tgt_vocab)?;
            let mut model = Model::<f64>::new_sentence(mcfg, &mut ChaCha8Rng::seed_from_u64(tcfg.seed))?;
            let report = train_sentence_stage(&mut model, &train_docs, &dev_docs, &tcfg, |e| {
                eprintln!("epoch {} train_loss={:.6} dev_loss={:.6}", e.epoch, e.train_loss, e.dev_loss)
            })?;
            (model, report)
        }
        Stage::Context => {
            let init = a.init.as_ref().ok_or("the context stage needs --init with a stage-1 checkpoint")?;
            let base = load_checkpoint::<f64>(init)?;
            if base.model.stage() != Stage::Sentence {
                return Err(format!("{} is not a sentence-stage checkpoint", init.display()).into());
            }
            let mut mcfg = base.model.config().clone();
            apply_config(&config_text, &mut mcfg, &mut tcfg)?;
            let train_docs = load_corpus(&a.train, &src_vocab, &tgt_vocab)?;
            let dev_docs = load_corpus(&a.dev, &src_vocab, &tgt_vocab)?;
            let mut model = Model::with_context(&base.model, mcfg, &mut ChaCha8Rng::seed_from_u64(tcfg.seed))?;
            let report = train_context_stage(&mut model, &train_docs, &dev_docs, &tcfg, |e| {
                eprintln!("epoch {} train_loss={:.6} dev_loss={:.6}", e.epoch, e.train_loss, e.dev_loss)
            })?;
            (model, report)
        }
    };
    let text = format!("{}params.total={}\nparams.trainable={}\n", report.to_text(), model.params().total_size(), model.trainable_size());
    print!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    save_checkpoint(&a.out, &Checkpoint { model, src_vocab: Some(src_vocab), tgt_vocab: Some(tgt_vocab) })?;
    Ok(())
}

fn translate(ckpt: &Path, src: &Path, out: &Path, iterative: bool, max_len: usize) -> CliResult<()> {
    let ckpt = load_checkpoint::<f64>(ckpt)?;
    let (sv, tv) = checkpoint_vocabs(&ckpt)?;
    let docs = load_documents(src, sv)?;
    let mut hyps = Vec::with_capacity(docs.len());
    for doc in &docs {
        let out = if iterative {
            iterative_decode(&ckpt.model, doc, DecodeOptions { max_len, passes: 2 })?.passes.pop().expect("one pass")
        } else {
            single_pass_decode(&ckpt.model, doc, max_len)?
        };
        hyps.push(out);
    }
    let text = hiersparse::corpus::format_documents(hyps.iter().map(Vec::as_slice), tv);
    fs::write(out, text).map_err(|e| format!("{}: {e}", out.display()))?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

/// Pairs hypothesis and reference sentences line by line. Blank reference
/// lines are document boundaries; a blank hypothesis line elsewhere is an
/// empty translation.
fn aligned_sentences(hyp: &str, reference: &str) -> CliResult<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let (h, r): (Vec<&str>, Vec<&str>) = (hyp.lines().collect(), reference.lines().collect());
    if h.len() != r.len() {
        return Err(format!("hypothesis has {} lines, reference {}", h.len(), r.len()).into());
    }
    let split = |l: &str| l.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    Ok(h.iter().zip(&r).filter(|(_, r)| !r.trim().is_empty()).map(|(h, r)| (split(h), split(r))).unzip())
}

fn eval_bleu(hyp: &Path, reference: &Path, smooth: bool) -> CliResult<()> {
    let (h, r) = aligned_sentences(&read_text(hyp)?, &read_text(reference)?)?;
    let score = corpus_bleu(&h, &r, 4, smooth)?;
    println!("bleu={score:.4}");
    Ok(())
}

fn eval_contrastive(ckpt: &Path, items: &Path, report: &Path) -> CliResult<()> {
    let ckpt = load_checkpoint::<f64>(ckpt)?;
    let (sv, tv) = checkpoint_vocabs(&ckpt)?;
    let docs = load_corpus(items, sv, tv)?;
    let items = read_contrastive_items(&items.join("contrastive.txt"), &docs, tv)?;
    let text = score_contrastive(&ckpt.model, &items, GateMode::Learned)?.to_text();
    fs::write(report, &text).map_err(|e| format!("{}: {e}", report.display()))?;
    print!("{text}");
    Ok(())
}

fn inspect(ckpt: &Path, doc: &Path, tgt: Option<&Path>, index: usize, sentence: usize, token: usize) -> CliResult<()> {
    let ckpt = load_checkpoint::<f64>(ckpt)?;
    let (sv, tv) = checkpoint_vocabs(&ckpt)?;
    let src_docs = load_documents(doc, sv)?;
    let src = src_docs.get(index).ok_or_else(|| format!("document {index} not found in {}", doc.display()))?;
    let tgt_docs = tgt.map(|p| load_documents(p, tv)).transpose()?;
    let tgt_doc = match &tgt_docs {
        Some(d) => Some(d.get(index).ok_or_else(|| format!("target document {index} not found"))?.as_slice()),
        None => None,
    };
    print!("{}", inspect_attention(&ckpt.model, src, tgt_doc, sentence, token)?.to_text());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { seed, docs, doc_len, sent_len, classes, vocab, min_distance, max_distance, out } => {
            let distance = DistanceDistribution { min: min_distance, max: max_distance };
            gen_data(SyntheticConfig { seed, docs, doc_len, sent_len, vocab, classes, distance }, &out)
        }
        Command::Train { stage, config, train: t, dev, out, init, report } => {
            train(TrainArgs { stage, config, train: t, dev, out, init, report })
        }
        Command::Translate { ckpt, src, out, iterative, max_len } => translate(&ckpt, &src, &out, iterative, max_len),
        Command::EvalBleu { hyp, r#ref, smooth } => eval_bleu(&hyp, &r#ref, smooth),
        Command::EvalContrastive { ckpt, items, report } => eval_contrastive(&ckpt, &items, &report),
        Command::InspectAttn { ckpt, doc, tgt, index, sentence, token } => inspect(&ckpt, &doc, tgt.as_deref(), index, sentence, token),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
