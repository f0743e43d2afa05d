use proptest::prelude::*;
use rand::Rng as _;

use super::*;

fn lang(s: &str) -> LanguageCode {
    LanguageCode::new(s).unwrap()
}

const LA: [&str; 6] = ["ka", "ko", "kaki", "mo", "ma", "moma"];
const LB: [&str; 6] = ["tu", "te", "tute", "su", "si", "susi"];

/// Word-for-word relabeling between two toy languages.
fn toy_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = seeding::rng(seed, 77, 0);
    let pairs = (0..n)
        .map(|_| {
            let len = rng.gen_range(2..5);
            let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..LA.len())).collect();
            SentencePair::new(
                idx.iter().map(|&i| LA[i].to_string()).collect(),
                idx.iter().map(|&i| LB[i].to_string()).collect(),
                lang("la"),
                lang("lb"),
            )
            .unwrap()
        })
        .collect();
    ParallelCorpus::from_pairs(lang("la"), lang("lb"), pairs).unwrap()
}

fn toy_tokenizer() -> Tokenizer {
    build_tokenizer(&[toy_corpus(80, 1)], 10, 1).unwrap()
}

fn quick_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: steps / 10,
        total_steps: steps,
        batch_tokens: 120,
        dropout: 0.0,
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn small_model(v: usize) -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        max_positions: 16,
        ..ModelConfig::tiny(v)
    }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig {
        peak_lr: 0.002,
        warmup_steps: 200,
        total_steps: 2000,
        ..TrainConfig::desk()
    };
    assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.0);
    assert_eq!(lr_schedule(200, &cfg).unwrap(), 0.002);
    assert!((lr_schedule(1100, &cfg).unwrap() - 0.001).abs() < 1e-15);
    assert_eq!(lr_schedule(2000, &cfg).unwrap(), 0.0);
    assert!(matches!(lr_schedule(2001, &cfg), Err(TrainError::StepOutOfRange { .. })));
    let flat = TrainConfig {
        warmup_steps: 10,
        total_steps: 10,
        ..cfg
    };
    assert_eq!(lr_schedule(10, &flat).unwrap(), flat.peak_lr);
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_peaks_once(w in 1u64..300, extra in 1u64..3000) {
        let cfg = TrainConfig { warmup_steps: w, total_steps: w + extra, ..TrainConfig::desk() };
        let lrs: Vec<f64> = (0..=cfg.total_steps).map(|s| lr_schedule(s, &cfg).unwrap()).collect();
        let max = lrs.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(max, cfg.peak_lr);
        let slope = cfg.peak_lr / w.min(extra) as f64;
        for pair in lrs.windows(2) {
            prop_assert!((pair[1] - pair[0]).abs() <= slope * (1.0 + 1e-9));
        }
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let cfg = TrainConfig::desk();
    let mut p = vec![0.5, -1.0];
    let mut st = AdamState::new(2);
    adam_step(&mut p, &[0.0, 0.0], &mut st, 0.01, &cfg).unwrap();
    assert_eq!(p, vec![0.5, -1.0]);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_closed_form() {
    let cfg = TrainConfig::desk();
    let mut p = vec![0.0];
    let mut st = AdamState::new(1);
    adam_step(&mut p, &[1.0], &mut st, 0.001, &cfg).unwrap();
    // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    let want = -0.001 / (1.0 + 1e-8);
    assert!((p[0] - want).abs() < 1e-18, "{}", p[0]);
    assert!(p[0] > -0.001 && p[0] < -0.000_999_999);
}

#[test]
fn adam_two_steps_match_unrolled_recursion() {
    let cfg = TrainConfig::desk();
    let (g, lr) = (0.3, 0.01);
    let mut p = vec![2.0];
    let mut st = AdamState::new(1);
    adam_step(&mut p, &[g], &mut st, lr, &cfg).unwrap();
    adam_step(&mut p, &[g], &mut st, lr, &cfg).unwrap();
    // hand-unrolled
    let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-8);
    let m1 = (1.0 - b1) * g;
    let v1 = (1.0 - b2) * g * g;
    let x1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
    let m2 = b1 * m1 + (1.0 - b1) * g;
    let v2 = b2 * v1 + (1.0 - b2) * g * g;
    let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    assert!((p[0] - x2).abs() < 1e-15);
    assert!((st.m[0] - m2).abs() < 1e-15 && (st.v[0] - v2).abs() < 1e-15);
}

#[test]
fn adam_rejects_non_finite_updates_without_mutation() {
    let cfg = TrainConfig::desk();
    let mut p = vec![1.0];
    let mut st = AdamState::new(1);
    let err = adam_step(&mut p, &[f64::NAN], &mut st, 0.1, &cfg).unwrap_err();
    assert!(err.is_numerical());
    assert_eq!((p[0], st.step), (1.0, 0));
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::desk();
    c.warmup_steps = c.total_steps + 1;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::desk();
    c.peak_lr = 0.0;
    assert!(c.validate().is_err());
    assert!(TrainConfig::finetune_desk().validate().is_ok());
    assert_eq!(TrainConfig::finetune_desk().dropout, 0.3);
}

#[test]
fn direction_frequencies_within_four_sigma() {
    let a = toy_corpus(100, 1);
    let b = toy_corpus(300, 2).reversed();
    let c = toy_corpus(50, 3).with_weight(4.0);
    let sampler = DirectionSampler::new(&[a, b, c], 9).unwrap();
    let n = 12_000u64;
    let mut counts = [0u64; 3];
    for step in 1..=n {
        counts[sampler.direction(step)] += 1;
    }
    let probs = [100.0 / 600.0, 300.0 / 600.0, 200.0 / 600.0];
    for (c, p) in counts.iter().zip(probs) {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - mean).abs() <= 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn empty_pool_is_rejected() {
    assert!(matches!(DirectionSampler::new(&[], 0), Err(TrainError::EmptyPool)));
    let empty = ParallelCorpus::empty(lang("la"), lang("lb"));
    assert!(matches!(DirectionSampler::new(&[empty], 0), Err(TrainError::EmptyCorpus(_))));
}

#[test]
fn tokenizer_round_trip() {
    let tok = toy_tokenizer();
    let words: Vec<String> = ["kaki", "mo", "ma"].iter().map(|s| s.to_string()).collect();
    let ids = tok.encode_side(&words, 64);
    assert_eq!(*ids.last().unwrap(), EOS_ID);
    assert_eq!(tok.decode_words(&ids).unwrap(), words);
    assert!(tok.language_id(&lang("la")).is_ok());
    assert_eq!(tok.encode_side(&words, 2).len(), 2);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(80, 1);
    let model = small_model(tok.vocab().len());
    let ctx = TrainContext::new(&tok);
    let cfg = quick_cfg(150);
    let a = direct_train(&corpus, &ctx, &cfg, &model).unwrap();
    let b = pretrain(std::slice::from_ref(&corpus), &ctx, &cfg, &model).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 150);
    let first = a.log[0].loss;
    let last = a.log.iter().rev().take(10).map(|e| e.loss).sum::<f64>() / 10.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(a.checkpoint.step, 150);
    assert_eq!(a.checkpoint.params.config.dropout, model.dropout);
}

#[test]
fn ras_training_requires_a_lexicon() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(20, 1);
    let cfg = TrainConfig {
        ras: Some(RasConfig::default()),
        ..quick_cfg(2)
    };
    let err = direct_train(&corpus, &TrainContext::new(&tok), &cfg, &small_model(tok.vocab().len())).unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)));
}

#[test]
fn finetune_with_zero_steps_returns_the_input() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(40, 1);
    let ctx = TrainContext::new(&tok);
    let model = small_model(tok.vocab().len());
    let pre = direct_train(&corpus, &ctx, &quick_cfg(5), &model).unwrap();
    let cfg = TrainConfig {
        total_steps: 0,
        warmup_steps: 0,
        ..TrainConfig::finetune_desk()
    };
    let ft = finetune(&pre.checkpoint, &corpus.reversed(), &ctx, &cfg).unwrap();
    assert_eq!(ft.checkpoint.params, pre.checkpoint.params);
    assert!(ft.log.is_empty());
    // fresh optimizer state
    assert_eq!(ft.checkpoint.adam.as_ref().unwrap().step, 0);
}

#[test]
fn finetune_rejects_a_different_vocabulary() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(40, 1);
    let model = small_model(tok.vocab().len());
    let pre = direct_train(&corpus, &TrainContext::new(&tok), &quick_cfg(2), &model).unwrap();
    let other = build_tokenizer(&[toy_corpus(80, 2)], 3, 1).unwrap();
    let err = finetune(&pre.checkpoint, &corpus, &TrainContext::new(&other), &quick_cfg(2)).unwrap_err();
    assert!(matches!(err, TrainError::VocabMismatch { .. }));
}

#[test]
fn divergence_aborts_with_last_good_state() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(40, 1);
    let cfg = TrainConfig {
        peak_lr: 1e200,
        warmup_steps: 0,
        ..quick_cfg(10)
    };
    let err = direct_train(&corpus, &TrainContext::new(&tok), &cfg, &small_model(tok.vocab().len())).unwrap_err();
    assert!(err.is_numerical());
    match err {
        TrainError::NaNLoss { step, last_good } | TrainError::NaNUpdate { step, last_good } => {
            assert_eq!(last_good.step, step - 1);
            assert!(last_good.params.all_finite());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(40, 1);
    let dir = tempfile::tempdir().unwrap();
    let ctx = TrainContext {
        out_dir: Some(dir.path()),
        ..TrainContext::new(&tok)
    };
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick_cfg(5)
    };
    let out = direct_train(&corpus, &ctx, &cfg, &small_model(tok.vocab().len())).unwrap();
    let path = dir.path().join("checkpoint_last.mrasp");
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let again = dir.path().join("again.mrasp");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    assert!(dir.path().join("checkpoint_2.mrasp").exists());
    assert!(dir.path().join("checkpoint_4.mrasp").exists());

    let log = fs::read_to_string(dir.path().join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], out.log[0].to_line());
    assert_eq!(lines[0].split('\t').count(), 3);

    assert!(Checkpoint::load_for(&path, tok.vocab()).is_ok());
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes, &path), Err(TrainError::ChecksumMismatch(_))));
    assert!(matches!(
        Checkpoint::from_bytes(b"NOPE\n\n", &path),
        Err(TrainError::MalformedCheckpoint { .. })
    ));
}

#[test]
fn checkpoint_without_optimizer_state() {
    let p = init_parameters(&ModelConfig::tiny(7), 1, InitOptions::default()).unwrap();
    let ck = Checkpoint {
        params: p,
        adam: None,
        step: 0,
        loss: f64::NAN,
        vocab_hash: "abc".into(),
    };
    let bytes = ck.to_bytes();
    assert!(bytes.starts_with(b"MRASP1\n"));
    let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
    assert!(back.loss.is_nan() && back.adam.is_none());
    assert_eq!(back.params, ck.params);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn evaluation_and_translation_run() {
    let tok = toy_tokenizer();
    let corpus = toy_corpus(40, 1);
    let model = small_model(tok.vocab().len());
    let out = direct_train(&corpus, &TrainContext::new(&tok), &quick_cfg(3), &model).unwrap();
    let stats = evaluate_corpus(&out.checkpoint.params, &tok, &corpus).unwrap();
    assert!(stats.tokens > 0 && stats.mean_loss().is_finite());
    let p = &out.checkpoint.params;
    let g = translate_words(p, &tok, &["ka", "mo"], &lang("la"), &lang("lb"), Search::Greedy, 8).unwrap();
    let b = translate_words(p, &tok, &["ka", "mo"], &lang("la"), &lang("lb"), Search::Beam(1), 8).unwrap();
    assert_eq!(g, b);
}
