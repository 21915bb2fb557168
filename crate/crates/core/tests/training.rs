use edos_core::checkpoint::{Checkpoint, ModelSpec};
use edos_core::data::{
    generate_synthetic, split_dataset, LabeledExample, SyntheticSpec, DEFAULT_RATIOS,
};
use edos_core::encoder::{AttentionKind, EncoderConfig};
use edos_core::finetune::{select_training_set, train, TrainConfig, TrainTask};
use edos_core::heads::{HeadConfig, HeadVariant, ModelBundle};
use edos_core::inference::{joint_b_predict, predict_probs};
use edos_core::nn::Fwd;
use edos_core::optim::{AdamW, AdamWConfig};
use edos_core::pretrain::{dapt_run, mask_tokens, mlm_loss, DaptConfig, MlmModel, ENC, MLM_BIAS};
use edos_core::tokenizer::{TokenBatch, Vocabulary, CLS, NUM_SPECIAL, PAD, SEP};
use edos_numcore::{rng, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn small(kind: AttentionKind, vocab: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 16,
        ..EncoderConfig::toy(kind, vocab)
    }
}

fn dataset(n: usize) -> (Vec<LabeledExample>, Vec<LabeledExample>, Vocabulary) {
    let spec = SyntheticSpec {
        total_count: n,
        filler_words: (2, 6),
        ..SyntheticSpec::default()
    };
    let s = split_dataset(&generate_synthetic(&spec).unwrap(), DEFAULT_RATIOS, 0).unwrap();
    let texts: Vec<&str> = s.train.iter().map(|e| e.text.as_str()).collect();
    let vocab = Vocabulary::build(&texts, 1, 1000).unwrap();
    (s.train, s.dev, vocab)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        max_len: 16,
        optimizer: AdamWConfig {
            learning_rate: 1e-3,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn bundle(vocab: usize, variant: HeadVariant, k: usize) -> ModelBundle {
    let b = variant
        .is_dual()
        .then(|| small(AttentionKind::Disentangled, vocab));
    let mut head = HeadConfig::new(variant, k);
    head.branch_hidden = vec![8];
    head.trunk_hidden = vec![8];
    ModelBundle::new(small(AttentionKind::Absolute, vocab), b, head).unwrap()
}

fn corpus_batch(rows: usize, len: usize, seed: u64) -> TokenBatch {
    use rand::Rng;
    let mut r = rng::stream(seed, 0);
    let mut ids = Vec::new();
    for _ in 0..rows {
        let n = r.random_range(1..=len - 2);
        ids.push(CLS);
        ids.extend((0..n).map(|_| r.random_range(1..40u32)));
        ids.push(SEP);
        ids.extend(std::iter::repeat_n(PAD, len - n - 2));
    }
    TokenBatch::new(ids, rows, len).unwrap()
}

#[test]
fn masking_rate_is_close_to_nominal() {
    let b = corpus_batch(400, 32, 1);
    let m = mask_tokens(&b, 0.15, 40, &mut rng::stream(2, 0)).unwrap();
    let eligible = b.ids.iter().filter(|&&i| i >= NUM_SPECIAL).count();
    let rate = m.num_targets() as f64 / eligible as f64;
    assert!((0.13..=0.17).contains(&rate), "{rate}");
    let none = mask_tokens(&b, 0.0, 40, &mut rng::stream(2, 0)).unwrap();
    assert_eq!(none.num_targets(), 0);
    let all = mask_tokens(&b, 1.0, 40, &mut rng::stream(2, 0)).unwrap();
    assert_eq!(all.num_targets(), eligible);
    assert!(mask_tokens(&b, 1.5, 40, &mut rng::stream(2, 0)).is_err());
}

proptest! {
    #[test]
    fn structural_tokens_are_never_targets(seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let b = corpus_batch(6, 12, seed);
        let m = mask_tokens(&b, rate, 40, &mut rng::stream(seed, 1)).unwrap();
        prop_assert_eq!(&m.input.mask, &b.mask);
        for ((&old, &new), t) in b.ids.iter().zip(&m.input.ids).zip(&m.targets) {
            if matches!(old, PAD | CLS | SEP) {
                prop_assert_eq!(new, old);
                prop_assert!(t.is_none());
            }
            if let Some(t) = t {
                prop_assert_eq!(*t, old);
            }
        }
    }

    #[test]
    fn mlm_loss_ignores_untargeted_rows(noise in prop::collection::vec(-5.0f64..5.0, 12)) {
        let targets = [None, Some(2u32), None, Some(0)];
        let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let eval = |logits: &[f64]| {
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::from_f64(&[4, 3], logits).unwrap());
            let loss = mlm_loss(&mut g, l, &targets).unwrap().unwrap();
            g.value(loss).item()
        };
        let mut moved = base.clone();
        for r in [0usize, 2] {
            for c in 0..3 {
                moved[r * 3 + c] += noise[r * 3 + c];
            }
        }
        prop_assert_eq!(eval(&base), eval(&moved));
    }

    #[test]
    fn joint_rule_picks_the_best_category(p in prop::collection::vec(0.0f64..1.0, 5)) {
        let s: f64 = p.iter().sum::<f64>() + 1e-12;
        let p: Vec<f64> = p.iter().map(|x| x / s).collect();
        let k = joint_b_predict(&p);
        prop_assert!(k < 4);
        prop_assert!(p[..4].iter().all(|&x| x <= p[k]));
    }
}

#[test]
fn mlm_loss_reference_values() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[3, 100]));
    let loss = mlm_loss(&mut g, l, &[Some(5), None, Some(99)])
        .unwrap()
        .unwrap();
    assert!((g.value(loss).item() - 100f64.ln()).abs() < 1e-12);

    let mut sharp = vec![0.0; 100];
    sharp[7] = 30.0;
    let l = g.constant(Tensor::from_f64(&[1, 100], &sharp).unwrap());
    let loss = mlm_loss(&mut g, l, &[Some(7)]).unwrap().unwrap();
    assert!(g.value(loss).item() < 1e-9);
    assert!(mlm_loss(&mut g, l, &[None]).unwrap().is_none());
}

#[test]
fn output_layer_shares_the_input_embeddings() {
    let model = MlmModel::new(small(AttentionKind::Absolute, 40)).unwrap();
    let mut store = model.init::<f64>(&mut rng::stream(0, 0)).unwrap();
    let names: Vec<&str> = store.names().collect();
    assert!(names.iter().all(|n| n.starts_with(ENC) || *n == MLM_BIAS));
    assert_eq!(store.get(MLM_BIAS).unwrap().shape(), &[40]);

    // Id 39 never appears in the input, so its embedding row only gets
    // gradient through the output projection.
    let b = TokenBatch::new(vec![CLS, 10, 11, 12, SEP], 1, 5).unwrap();
    let m = mask_tokens(&b, 1.0, 12, &mut rng::stream(0, 0)).unwrap();
    let mut g = Graph::new();
    let mut r = rng::stream(0, 1);
    let loss = {
        let mut f = Fwd::new(&mut g, &store, &mut r);
        model.loss(&mut f, &m).unwrap().unwrap()
    };
    store.zero_grad();
    g.backward_into(loss, &mut store).unwrap();
    let emb = format!("{ENC}tok_emb");
    let d = store.get(&emb).unwrap().shape()[1];
    let grad = store.param(&emb).unwrap().grad.to_f64_vec();
    assert!(grad[39 * d..40 * d].iter().any(|&x| x != 0.0));

    let before = store.get(&emb).unwrap().clone();
    AdamW::new(AdamWConfig::default()).step(&mut store, |_| true);
    let after = store.get(&emb).unwrap().to_f64_vec();
    let changed = (0..d).any(|j| after[39 * d + j] != before.to_f64_vec()[39 * d + j]);
    assert!(changed);
}

#[test]
fn adamw_touches_only_parameters_with_gradient() {
    let mut store = ParamStore::<f64>::new();
    store
        .insert("a", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    store
        .insert("b", Tensor::from_f64(&[2], &[4.0, 5.0]).unwrap())
        .unwrap();
    store.accumulate_grad("a", &[0.5, 0.0, -1.0]).unwrap();
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        learning_rate: 0.1,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg);
    opt.step(&mut store, |_| true);
    assert_eq!(opt.steps(), 1);
    let a = store.get("a").unwrap().to_f64_vec();
    assert!((a[0] - 0.9).abs() < 1e-6);
    assert_eq!(a[1], 2.0);
    assert!((a[2] - 3.1).abs() < 1e-6);
    assert_eq!(store.get("b").unwrap().to_f64_vec(), [4.0, 5.0]);
}

#[test]
fn small_step_lowers_a_convex_probe_loss() {
    let x = Tensor::from_f64(
        &[4, 3],
        &[
            1.0, 0.5, -0.2, -1.0, 0.3, 0.8, 0.2, -0.7, 0.1, 0.9, 0.9, -0.4,
        ],
    )
    .unwrap();
    let ys = [0usize, 1, 2, 0];
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::zeros(&[3, 3])).unwrap();
    let loss_of = |store: &mut ParamStore<f64>, backward: bool| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param(store, "w").unwrap();
        let l = g.matmul(xv, w).unwrap();
        let loss = g.cross_entropy(l, &ys, None).unwrap();
        if backward {
            store.zero_grad();
            g.backward_into(loss, store).unwrap();
        }
        g.value(loss).item()
    };
    let before = loss_of(&mut store, true);
    AdamW::new(AdamWConfig {
        learning_rate: 1e-3,
        ..AdamWConfig::default()
    })
    .step(&mut store, |_| true);
    assert!(loss_of(&mut store, false) < before);
}

#[test]
fn category_training_set_is_the_sexist_part_of_task_a() {
    let (train, _, _) = dataset(200);
    let (a, ya) = select_training_set(&train, TrainTask::A).unwrap();
    let (b, _) = select_training_set(&train, TrainTask::B).unwrap();
    let sexist: Vec<&str> = a
        .iter()
        .zip(&ya)
        .filter(|(_, &y)| y == 1)
        .map(|(e, _)| e.id.as_str())
        .collect();
    let b_ids: Vec<&str> = b.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(sexist, b_ids);
    let rest = a.iter().zip(&ya).filter(|(_, &y)| y == 0).count();
    assert_eq!(b.len() + rest, a.len());
}

#[test]
fn training_is_bitwise_reproducible() {
    let (tr, dev, vocab) = dataset(120);
    let m = bundle(vocab.len(), HeadVariant::DualMLPConcatMLP, 2);
    let run = || {
        let init = m.init::<f32>(&mut rng::stream(4, 0)).unwrap();
        train(&m, init, &vocab, &tr, &dev, &cfg(2), |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.best.bit_eq(&b.best));
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.epochs.len(), 2);
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let (tr, dev, vocab) = dataset(60);
    let m = bundle(vocab.len(), HeadVariant::LastLayerMLP, 2);
    let init = m.init::<f32>(&mut rng::stream(1, 0)).unwrap();
    let out = train(&m, init.clone(), &vocab, &tr, &dev, &cfg(0), |_| {}).unwrap();
    assert!(out.best.bit_eq(&init));
    assert!(out.log.epochs.is_empty());
    assert_eq!(out.log.best_epoch, None);
}

#[test]
fn mismatched_head_is_rejected() {
    let (tr, dev, vocab) = dataset(60);
    let m = bundle(vocab.len(), HeadVariant::LastLayerMLP, 4);
    let init = m.init::<f32>(&mut rng::stream(1, 0)).unwrap();
    assert!(train(&m, init, &vocab, &tr, &dev, &cfg(1), |_| {}).is_err());
}

#[test]
fn pretraining_for_zero_epochs_keeps_the_weights() {
    let corpus: Vec<String> = (0..20)
        .map(|i| format!("w{} w{} w{}", i % 5, i % 3, i % 7))
        .collect();
    let vocab = Vocabulary::build(&corpus, 1, 100).unwrap();
    let model = MlmModel::new(small(AttentionKind::Disentangled, vocab.len())).unwrap();
    let init = model.init::<f32>(&mut rng::stream(0, 0)).unwrap();
    let dc = DaptConfig {
        epochs: 0,
        max_len: 16,
        ..DaptConfig::default()
    };
    let out = dapt_run(&corpus, &vocab, &model, init.clone(), &dc, |_| {}).unwrap();
    assert!(out.store.bit_eq(&init));
    assert!(out.log.is_empty());
    let one = DaptConfig { epochs: 1, ..dc };
    let out = dapt_run(&corpus, &vocab, &model, init.clone(), &one, |_| {}).unwrap();
    assert!(!out.store.bit_eq(&init));
    assert_eq!(out.log.len(), 1);
    let e = out.log[0];
    assert!((e.perplexity - e.eval_loss.exp()).abs() < 1e-9);
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let m = bundle(30, HeadVariant::DualConcatMLP, 5);
    let store = m.init::<f32>(&mut rng::stream(6, 0)).unwrap();
    let vocab = Vocabulary::build(&["a b c d"], 1, 30).unwrap();
    let ck = Checkpoint {
        model: ModelSpec::Classifier {
            bundle: m,
            task: TrainTask::BJoint,
            max_len: 16,
            experiment: Some(7),
        },
        vocab,
        config: serde_json::json!({"seed": 6}),
        store,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert!(back.store.bit_eq(&ck.store));
    assert_eq!(back.model, ck.model);
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.config, ck.config);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    let mut bad = ck.to_bytes().unwrap();
    bad[0] ^= 1;
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
}

#[test]
fn predictions_follow_input_order() {
    let (tr, _, vocab) = dataset(100);
    let m = bundle(vocab.len(), HeadVariant::AvgLayersMLP, 2);
    let store = m.init::<f32>(&mut rng::stream(2, 0)).unwrap();
    let texts: Vec<&str> = tr.iter().map(|e| e.text.as_str()).collect();
    let fwd = predict_probs(&m, &store, &vocab, &texts, 16).unwrap();
    let rev: Vec<&str> = texts.iter().rev().copied().collect();
    let back = predict_probs(&m, &store, &vocab, &rev, 16).unwrap();
    for (a, b) in fwd.iter().zip(back.iter().rev()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn pretrained_encoders_fill_matching_slots() {
    use edos_core::finetune::load_pretrained_encoder;
    use edos_core::heads::ENC_B;
    let m = bundle(30, HeadVariant::DualMLPConcatMLP, 2);
    let mut store = m.init::<f32>(&mut rng::stream(0, 0)).unwrap();
    let fresh = store.clone();
    let mlm = MlmModel::new(small(AttentionKind::Disentangled, 30)).unwrap();
    let pre = mlm.init::<f32>(&mut rng::stream(9, 0)).unwrap();
    let slots =
        load_pretrained_encoder(&m, &mut store, AttentionKind::Disentangled, &pre, ENC).unwrap();
    assert_eq!(slots, vec![ENC_B]);
    for (name, p) in store.iter() {
        if let Some(rest) = name.strip_prefix(ENC_B) {
            assert!(
                p.value.bit_eq(pre.get(&format!("{ENC}{rest}")).unwrap()),
                "{name}"
            );
        } else {
            assert!(p.value.bit_eq(fresh.get(name).unwrap()), "{name}");
        }
    }
    let wrong = MlmModel::new(small(AttentionKind::Absolute, 31)).unwrap();
    let pre = wrong.init::<f32>(&mut rng::stream(9, 0)).unwrap();
    assert!(load_pretrained_encoder(&m, &mut store, AttentionKind::Absolute, &pre, ENC).is_err());
}
