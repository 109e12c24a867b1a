//! Document likelihood and the two training stages.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DocumentPair;
use crate::error::{Error, Result};
use crate::graph::{log_softmax_rows, Graph, Grads, ParamStore};
use crate::model::{document_forward, parse_kv, ForwardOptions, Model, ParamGroup, Stage};
use crate::optim::{adam_step_filtered, AdamState};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    /// Consecutive non-improving dev evaluations before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Documents whose gradients are summed before each update.
    pub docs_per_step: usize,
    /// Context stage only: update the context layer alone.
    pub freeze_sentence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 20, lr: 1e-4, patience: 3, seed: 1, docs_per_step: 1, freeze_sentence: false }
    }
}

impl TrainConfig {
    /// Applies one `key=value` pair; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "max_epochs" | "epochs" => self.max_epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "docs_per_step" => self.docs_per_step = num(key, value)?,
            "freeze_sentence" => self.freeze_sentence = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean label-smoothed loss per target token, dropout on.
    pub train_loss: f64,
    /// Mean label-smoothed loss per target token, dropout off.
    pub dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub best_dev_loss: f64,
    pub best_epoch: usize,
    pub patience_counter: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage={}", self.stage);
        let _ = writeln!(s, "epochs={}", self.epochs.len());
        for e in &self.epochs {
            let _ = writeln!(s, "epoch.{}.train_loss={:?}", e.epoch, e.train_loss);
            let _ = writeln!(s, "epoch.{}.dev_loss={:?}", e.epoch, e.dev_loss);
        }
        let _ = writeln!(s, "best_dev_loss={:?}", self.best_dev_loss);
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "patience_counter={}", self.patience_counter);
        let _ = writeln!(s, "stopped_early={}", self.stopped_early);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("report lacks {k}")));
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("bad report value {v:?} for {k}")))
        }
        let n: usize = num("epochs", get("epochs")?)?;
        let epochs = (1..=n)
            .map(|e| {
                let tk = format!("epoch.{e}.train_loss");
                let dk = format!("epoch.{e}.dev_loss");
                Ok(EpochRecord { epoch: e, train_loss: num(&tk, get(&tk)?)?, dev_loss: num(&dk, get(&dk)?)? })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stage: get("stage")?.parse()?,
            epochs,
            best_dev_loss: num("best_dev_loss", get("best_dev_loss")?)?,
            best_epoch: num("best_epoch", get("best_epoch")?)?,
            patience_counter: num("patience_counter", get("patience_counter")?)?,
            stopped_early: num("stopped_early", get("stopped_early")?)?,
        })
    }
}

/// Decides when training stops: after `patience` consecutive evaluations
/// that fail to improve on the best dev loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, counter: 0 }
    }

    /// Records a dev loss; returns `true` if it is a new best.
    pub fn observe(&mut self, epoch: usize, dev_loss: f64) -> bool {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.best_epoch = epoch;
            self.counter = 0;
            true
        } else {
            self.counter += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.counter >= self.patience
    }
}

/// Per-sentence `Σ_n log P(y_n | y_<n, x, context)` under teacher forcing
/// (the EOS term included).
pub fn sentence_log_likelihoods<T: Scalar>(model: &Model<T>, doc: &DocumentPair, opts: ForwardOptions) -> Result<Vec<f64>> {
    let mut g = Graph::new(model.params());
    let f = document_forward(&mut g, model, &doc.src, &doc.tgt, opts)?;
    let logp = log_softmax_rows(g.value(f.logits));
    Ok(f.target_ranges
        .ranges()
        .iter()
        .map(|r| r.clone().map(|i| logp.at(i, f.targets[i]).as_f64()).sum())
        .collect())
}

/// `Σ_j Σ_n log P(y_n^j | y_<n^j, x^j, D_−j)` with teacher forcing.
pub fn document_log_likelihood<T: Scalar>(model: &Model<T>, doc: &DocumentPair, opts: ForwardOptions) -> Result<f64> {
    Ok(sentence_log_likelihoods(model, doc, opts)?.into_iter().sum())
}

fn doc_tokens(doc: &DocumentPair) -> usize {
    doc.tgt.iter().map(|s| s.len() + 1).sum()
}

/// Summed label-smoothed loss of one document and its token count.
pub fn document_loss<T: Scalar>(model: &Model<T>, doc: &DocumentPair, opts: ForwardOptions) -> Result<(f64, usize)> {
    let mut g = Graph::new(model.params());
    let f = document_forward(&mut g, model, &doc.src, &doc.tgt, opts)?;
    let loss = g.cross_entropy(f.logits, &f.targets, T::lit(model.config().label_smoothing))?;
    Ok((g.value(loss).item().as_f64(), f.targets.len()))
}

/// Mean label-smoothed loss per target token, dropout off.
pub fn corpus_loss<T: Scalar>(model: &Model<T>, docs: &[DocumentPair]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Corpus("empty evaluation corpus".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for d in docs {
        let (l, n) = document_loss(model, d, ForwardOptions::default())?;
        total += l;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Adds the gradient of one document's mean per-token loss to `grads`
/// (dropout active) and returns that loss.
pub fn accumulate_document_gradient<T: Scalar>(
    model: &Model<T>,
    doc: &DocumentPair,
    grads: &mut Grads<T>,
    rng: ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::training(model.params(), rng);
    let f = document_forward(&mut g, model, &doc.src, &doc.tgt, ForwardOptions::default())?;
    let ce = g.cross_entropy(f.logits, &f.targets, T::lit(model.config().label_smoothing))?;
    let loss = g.scale(ce, T::one() / T::from_usize(f.targets.len()).unwrap())?;
    g.backward(loss, grads)?;
    Ok(g.value(loss).item().as_f64())
}

fn snapshot<T: Scalar>(store: &ParamStore<T>) -> Vec<crate::tensor::Tensor<T>> {
    store.iter().map(|(_, _, t)| t.clone()).collect()
}

fn restore<T: Scalar>(store: &mut ParamStore<T>, snap: Vec<crate::tensor::Tensor<T>>) {
    for (id, t) in store.ids().collect::<Vec<_>>().into_iter().zip(snap) {
        *store.get_mut(id) = t;
    }
}

fn run<T: Scalar>(
    model: &mut Model<T>,
    train: &[DocumentPair],
    dev: &[DocumentPair],
    cfg: &TrainConfig,
    stage: Stage,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Corpus("empty training corpus".into()));
    }
    if dev.is_empty() {
        return Err(Error::Corpus("empty dev corpus".into()));
    }
    if cfg.docs_per_step == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("docs_per_step and max_epochs must be positive".into()));
    }
    let trainable: Vec<bool> = model
        .params()
        .ids()
        .map(|id| match model.group(id) {
            ParamGroup::Base => false,
            ParamGroup::Context => true,
            _ => !(stage == Stage::Context && cfg.freeze_sentence),
        })
        .collect();
    let mut adam = AdamState::new(model.params(), T::lit(cfg.lr));
    let mut grads = Grads::zeros_like(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = snapshot(model.params());
    let mut epochs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(cfg.docs_per_step) {
            grads.zero();
            for &i in chunk {
                let doc_rng = ChaCha8Rng::seed_from_u64(rng.random());
                let mean = accumulate_document_gradient(model, &train[i], &mut grads, doc_rng)?;
                let n = doc_tokens(&train[i]);
                total += mean * n as f64;
                tokens += n;
            }
            adam_step_filtered(model.params_mut(), &grads, &mut adam, |id| trainable[id.index()])?;
        }
        let dev_loss = corpus_loss(model, dev)?;
        let record = EpochRecord { epoch, train_loss: total / tokens as f64, dev_loss };
        observer(&record);
        epochs.push(record);
        if stopper.observe(epoch, dev_loss) {
            best = snapshot(model.params());
        } else if stopper.should_stop() {
            break;
        }
    }
    restore(model.params_mut(), best);
    Ok(TrainReport {
        stage,
        stopped_early: stopper.should_stop(),
        best_dev_loss: stopper.best,
        best_epoch: stopper.best_epoch,
        patience_counter: stopper.counter,
        epochs,
    })
}

/// Pre-trains the sentence-level Transformer.
pub fn train_sentence_stage<T: Scalar>(
    model: &mut Model<T>,
    train: &[DocumentPair],
    dev: &[DocumentPair],
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if model.stage() != Stage::Sentence {
        return Err(Error::Config("sentence-stage training needs a sentence-stage model".into()));
    }
    run(model, train, dev, cfg, Stage::Sentence, observer)
}

/// Jointly optimizes the stacks and the context layer of a model built with
/// [`Model::with_context`].
pub fn train_context_stage<T: Scalar>(
    model: &mut Model<T>,
    train: &[DocumentPair],
    dev: &[DocumentPair],
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if model.stage() != Stage::Context || !model.has_context() {
        return Err(Error::Config("context-stage training needs a model initialized from a stage-1 checkpoint".into()));
    }
    run(model, train, dev, cfg, Stage::Context, observer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_consecutive_failures() {
        let mut s = EarlyStopping::new(3);
        assert!(s.observe(1, 2.0));
        assert!(!s.observe(2, 2.5));
        assert!(!s.observe(3, 2.0));
        assert!(!s.should_stop());
        assert!(s.observe(4, 1.5));
        for e in 5..8 {
            assert!(!s.should_stop());
            s.observe(e, 1.6);
        }
        assert!(s.should_stop());
        assert_eq!((s.best, s.best_epoch), (1.5, 4));
    }

    #[test]
    fn report_round_trip() {
        let r = TrainReport {
            stage: Stage::Context,
            epochs: vec![EpochRecord { epoch: 1, train_loss: 2.5, dev_loss: 2.25 }, EpochRecord { epoch: 2, train_loss: 1.0 / 3.0, dev_loss: 0.1 }],
            best_dev_loss: 0.1,
            best_epoch: 2,
            patience_counter: 0,
            stopped_early: false,
        };
        assert_eq!(TrainReport::from_text(&r.to_text()).unwrap(), r);
    }
}
