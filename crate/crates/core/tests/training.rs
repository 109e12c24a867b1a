mod common;

use common::{all_configs, random_context_model, rng, tiny_config};
use hiersparse::attention::Setting;
use hiersparse::corpus::{generate_synthetic_docs, DistanceDistribution, DocumentPair, SyntheticConfig, EOS};
use hiersparse::decode::*;
use hiersparse::graph::{Graph, Grads};
use hiersparse::model::*;
use hiersparse::tensor::Tensor;
use hiersparse::train::*;

fn tiny_corpus(seed: u64, docs: usize) -> Vec<DocumentPair> {
    let cfg = SyntheticConfig {
        seed,
        docs,
        doc_len: 3,
        sent_len: 3,
        vocab: 6,
        classes: 2,
        distance: DistanceDistribution { min: 1, max: 2 },
    };
    generate_synthetic_docs(&cfg).unwrap().docs
}

/// Vocabulary sizes of `tiny_corpus`: 6 words, 2 markers, AMB on the
/// source; 6 words, 2 markers, 2 translations on the target.
fn corpus_config(attention: AttentionVariant, integration: Integration, setting: Setting) -> ModelConfig {
    ModelConfig { src_vocab: 13, tgt_vocab: 14, ..tiny_config(attention, integration, setting) }
}

fn snapshot(m: &Model<f64>) -> Vec<Tensor<f64>> {
    m.params().iter().map(|(_, _, t)| t.clone()).collect()
}

fn one_epoch(lr: f64, freeze_sentence: bool) -> TrainConfig {
    TrainConfig { max_epochs: 1, lr, patience: 3, seed: 5, docs_per_step: 2, freeze_sentence }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = corpus_config(AttentionVariant::HierSparseSoft, Integration::Decoder, Setting::Online);
    let train = tiny_corpus(1, 6);
    let mut m = random_context_model(&cfg, 2, 0.3);
    let before = snapshot(&m);
    train_context_stage(&mut m, &train, &train, &one_epoch(0.0, false), |_| {}).unwrap();
    assert_eq!(snapshot(&m), before);
}

#[test]
fn frozen_sentence_stacks_stay_bit_identical() {
    let cfg = corpus_config(AttentionVariant::HierSparseSparse, Integration::Encoder, Setting::Offline);
    let train = tiny_corpus(2, 6);
    let mut m = random_context_model(&cfg, 3, 0.3);
    let before = snapshot(&m);
    train_context_stage(&mut m, &train, &train, &one_epoch(1e-2, true), |_| {}).unwrap();
    let mut context_moved = false;
    for ((id, name, t), old) in m.params().iter().zip(&before) {
        match m.group(id) {
            ParamGroup::Context => context_moved |= t != old,
            _ => assert_eq!(t, old, "{name}"),
        }
    }
    assert!(context_moved);

    let mut joint = random_context_model(&cfg, 3, 0.3);
    train_context_stage(&mut joint, &train, &train, &one_epoch(1e-2, false), |_| {}).unwrap();
    let encoder_moved = joint.params().iter().zip(&before).any(|((id, _, t), old)| joint.group(id) == ParamGroup::Encoder && t != old);
    assert!(encoder_moved);
    let base_kept = joint.params().iter().zip(&before).all(|((id, _, t), old)| joint.group(id) != ParamGroup::Base || t == old);
    assert!(base_kept);
}

#[test]
fn gradients_reach_every_group() {
    for (attention, integration, setting) in all_configs() {
        let cfg = corpus_config(attention, integration, setting);
        let m = random_context_model(&cfg, 4, 0.3);
        let doc = &tiny_corpus(3, 1)[0];
        let mut grads = Grads::zeros_like(m.params());
        accumulate_document_gradient(&m, doc, &mut grads, rng(0)).unwrap();
        for group in [ParamGroup::Embeddings, ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Output, ParamGroup::Context] {
            let nonzero = m.params().ids().filter(|&id| m.group(id) == group).any(|id| grads.get(id).data().iter().any(|&g| g != 0.0));
            assert!(nonzero, "{group:?} {attention} {integration} {setting}");
        }
        let base = m.params().ids().filter(|&id| m.group(id) == ParamGroup::Base);
        assert!(base.into_iter().all(|id| grads.get(id).data().iter().all(|&g| g == 0.0)));
    }
}

#[test]
fn sentence_training_loss_falls_and_best_epoch_is_restored() {
    let cfg = corpus_config(AttentionVariant::HierSparseSoft, Integration::Encoder, Setting::Online);
    let train = tiny_corpus(4, 40);
    let dev = tiny_corpus(5, 10);
    let mut m = Model::<f64>::new_sentence(cfg, &mut rng(6)).unwrap();
    let tc = TrainConfig { max_epochs: 3, lr: 3e-3, patience: 3, seed: 7, docs_per_step: 2, freeze_sentence: false };
    let mut seen = Vec::new();
    let report = train_sentence_stage(&mut m, &train, &dev, &tc, |e| seen.push(e.clone())).unwrap();
    assert_eq!(report.epochs, seen);
    assert_eq!(report.stage, Stage::Sentence);
    assert!(report.epochs.windows(2).all(|w| w[1].train_loss < w[0].train_loss), "{:?}", report.epochs);
    let min = report.epochs.iter().map(|e| e.dev_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_dev_loss, min);
    assert_eq!(corpus_loss(&m, &dev).unwrap(), min);
    assert_eq!(TrainReport::from_text(&report.to_text()).unwrap(), report);
}

#[test]
fn early_stopping_rolls_back_a_diverging_run() {
    let cfg = corpus_config(AttentionVariant::FlatWord, Integration::Encoder, Setting::Online);
    let train = tiny_corpus(8, 10);
    let mut m = Model::<f64>::new_sentence(cfg, &mut rng(9)).unwrap();
    let tc = TrainConfig { max_epochs: 12, lr: 0.5, patience: 2, seed: 1, docs_per_step: 1, freeze_sentence: false };
    let report = train_sentence_stage(&mut m, &train, &train, &tc, |_| {}).unwrap();
    let min = report.epochs.iter().map(|e| e.dev_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_dev_loss, min);
    assert_eq!(corpus_loss(&m, &train).unwrap(), min);
    if report.stopped_early {
        assert_eq!(report.patience_counter, 2);
        assert_eq!(report.epochs.len(), report.best_epoch + 2);
    }
}

#[test]
fn fresh_context_layer_keeps_stage_one_loss() {
    let cfg = corpus_config(AttentionVariant::HierSparseSoft, Integration::Encoder, Setting::Online);
    let train = tiny_corpus(10, 40);
    let dev = tiny_corpus(11, 10);
    let mut s1 = Model::<f64>::new_sentence(cfg.clone(), &mut rng(12)).unwrap();
    let tc = TrainConfig { max_epochs: 4, lr: 3e-3, patience: 3, seed: 2, docs_per_step: 2, freeze_sentence: false };
    train_sentence_stage(&mut s1, &train, &dev, &tc, |_| {}).unwrap();
    let before = corpus_loss(&s1, &dev).unwrap();
    for attention in AttentionVariant::ALL {
        let c = ModelConfig { attention, ..cfg.clone() };
        let m = Model::with_context(&s1, c, &mut rng(13)).unwrap();
        let after = corpus_loss(&m, &dev).unwrap();
        assert!((after - before).abs() <= 0.05 * before, "{attention}: {after} vs {before}");
    }
    assert!(train_context_stage(&mut s1, &train, &dev, &tc, |_| {}).is_err());
    assert!(train_sentence_stage(&mut s1, &[], &dev, &tc, |_| {}).is_err());
}

/// Label-smoothed loss of sentence `j` alone and its gradient.
fn sentence_loss(m: &Model<f64>, doc: &DocumentPair, j: usize) -> (f64, Grads<f64>) {
    let mut g = Graph::new(m.params());
    let f = document_forward(&mut g, m, &doc.src, &doc.tgt, ForwardOptions::default()).unwrap();
    let r = f.target_ranges.ranges()[j].clone();
    let rows = g.slice_rows(f.logits, r.start, r.end).unwrap();
    let loss = g.cross_entropy(rows, &f.targets[r], 0.1).unwrap();
    let mut grads = Grads::zeros_like(m.params());
    g.backward(loss, &mut grads).unwrap();
    (g.value(loss).item(), grads)
}

#[test]
fn online_loss_terms_ignore_future_sentences() {
    for (attention, integration, _) in all_configs() {
        let cfg = corpus_config(attention, integration, Setting::Online);
        let m = random_context_model(&cfg, 14, 0.3);
        let doc = tiny_corpus(15, 1).remove(0);
        let mut other = doc.clone();
        other.src[2] = vec![4, 4, 4];
        other.tgt[2] = vec![5, 5];
        let (l0, g0) = sentence_loss(&m, &doc, 1);
        let (l1, g1) = sentence_loss(&m, &other, 1);
        assert_eq!(l0, l1, "{attention} {integration}");
        for id in m.params().ids() {
            assert_eq!(g0.get(id), g1.get(id), "{} {attention} {integration}", m.params().name(id));
        }
        let a = sentence_log_likelihoods(&m, &doc, ForwardOptions::default()).unwrap();
        let b = sentence_log_likelihoods(&m, &other, ForwardOptions::default()).unwrap();
        assert_eq!(a[..2], b[..2]);
    }
}

#[test]
fn document_likelihood_sums_sentence_terms() {
    let cfg = corpus_config(AttentionVariant::HierSparseSoft, Integration::Decoder, Setting::Offline);
    let m = random_context_model(&cfg, 16, 0.3);
    let docs = tiny_corpus(17, 5);
    for d in &docs {
        let terms = sentence_log_likelihoods(&m, d, ForwardOptions::default()).unwrap();
        let total = document_log_likelihood(&m, d, ForwardOptions::default()).unwrap();
        assert!((terms.iter().sum::<f64>() - total).abs() <= 1e-9);
        let forced = ForwardOptions { gate: GateMode::Forced(1.0), sentence_only: false };
        let plain = ForwardOptions { gate: GateMode::Learned, sentence_only: true };
        let a = document_log_likelihood(&m, d, forced).unwrap();
        let b = document_log_likelihood(&m, d, plain).unwrap();
        assert!((a - b).abs() <= 1e-9);
    }
    let mut reversed = docs.clone();
    reversed.reverse();
    let (a, b) = (corpus_loss(&m, &docs).unwrap(), corpus_loss(&m, &reversed).unwrap());
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn greedy_decoding_is_deterministic() {
    let cfg = corpus_config(AttentionVariant::HierSparseSparse, Integration::Decoder, Setting::Offline);
    let m = random_context_model(&cfg, 18, 0.5);
    let src = tiny_corpus(19, 1).remove(0).src;
    let a = iterative_decode(&m, &src, DecodeOptions { max_len: 5, passes: 2 }).unwrap();
    let b = iterative_decode(&m, &src, DecodeOptions { max_len: 5, passes: 2 }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.passes.len(), 2);
    assert!(a.output().iter().all(|s| s.len() <= 5));
    assert_eq!(refine_pass(&m, &src, &a.passes[0], 5).unwrap(), a.passes[1]);
    assert_eq!(a.passes[0], sentence_pass(&m, &src, 5).unwrap());
    assert!(greedy_decode(&m, &src, 0, None, 0).is_err());
}

#[test]
fn encoder_side_decoding_takes_one_pass() {
    let cfg = corpus_config(AttentionVariant::HierSparseSoft, Integration::Encoder, Setting::Online);
    let m = random_context_model(&cfg, 20, 0.5);
    let src = tiny_corpus(21, 1).remove(0).src;
    let it = iterative_decode(&m, &src, DecodeOptions { max_len: 6, passes: 2 }).unwrap();
    assert_eq!(it.passes.len(), 1);
    assert_eq!(it.output(), single_pass_decode(&m, &src, 6).unwrap());
}

#[test]
fn eos_first_gives_empty_translation() {
    let cfg = corpus_config(AttentionVariant::FlatSentence, Integration::Encoder, Setting::Online);
    let mut m = random_context_model(&cfg, 22, 0.5);
    let mut bias = vec![0.0; cfg.tgt_vocab];
    bias[EOS] = 100.0;
    m.set_param("out.w", Tensor::zeros(&[cfg.model_dim, cfg.tgt_vocab])).unwrap();
    m.set_param("out.b", Tensor::vector(bias)).unwrap();
    let src = vec![vec![4, 5], vec![6]];
    assert_eq!(greedy_decode(&m, &src, 1, None, 10).unwrap(), Vec::<usize>::new());
    let cache = build_encoder_context(&encode_document(&m, &src, None).unwrap()).unwrap();
    assert_eq!(greedy_decode(&m, &src, 1, Some(&cache), 10).unwrap(), Vec::<usize>::new());
}
