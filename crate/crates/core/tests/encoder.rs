use edos_core::encoder::{relative_index, AttentionKind, Encoder, EncoderConfig};
use edos_core::nn::Fwd;
use edos_core::tokenizer::{TokenBatch, CLS, PAD, SEP};
use edos_numcore::{rng, Graph, ParamStore, Tensor, Var};

fn cfg(kind: AttentionKind, layers: usize, heads: usize, d: usize, k: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: layers,
        n_heads: heads,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: 12,
        max_len: 16,
        attention: kind,
        relative_clip: k,
        dropout: 0.1,
        layer_norm_eps: 1e-5,
    }
}

fn init(enc: &Encoder, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng::stream(seed, 1)).unwrap();
    store
}

fn set(store: &mut ParamStore<f64>, name: &str, shape: &[usize], data: &[f64]) {
    store
        .set(name, Tensor::from_f64(shape, data).unwrap())
        .unwrap();
}

fn eye(d: usize) -> Vec<f64> {
    (0..d * d)
        .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
        .collect()
}

fn attention_out(
    enc: &Encoder,
    store: &ParamStore<f64>,
    h: &[f64],
    shape: &[usize],
    mask: &[bool],
) -> Vec<f64> {
    let mut g = Graph::new();
    let mut r = rng::stream(0, 0);
    let x = g.constant(Tensor::from_f64(shape, h).unwrap());
    let mut f = Fwd::new(&mut g, store, &mut r);
    let out = enc.attention(&mut f, 0, x, mask).unwrap();
    g.value(out).to_f64_vec()
}

fn identity_attention(kind: AttentionKind, d: usize, k: usize) -> (Encoder, ParamStore<f64>) {
    let enc = Encoder::new(cfg(kind, 1, 1, d, k), "").unwrap();
    let mut store = init(&enc, 0);
    for w in ["l0.wq.w", "l0.wv.w", "l0.wo.w", "l0.wk"] {
        set(&mut store, w, &[d, d], &eye(d));
    }
    for b in ["l0.wq.b", "l0.wv.b", "l0.wo.b"] {
        set(&mut store, b, &[d], &vec![0.0; d]);
    }
    if kind == AttentionKind::Disentangled {
        set(&mut store, "l0.wqr", &[d, d], &eye(d));
        set(&mut store, "l0.wkr", &[d, d], &eye(d));
    }
    (enc, store)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn two_token_absolute_attention_matches_hand_calculation() {
    let (enc, store) = identity_attention(AttentionKind::Absolute, 2, 8);
    let out = attention_out(
        &enc,
        &store,
        &[1.0, 0.0, 0.0, 1.0],
        &[1, 2, 2],
        &[true, true],
    );
    // logits [[1, 0], [0, 1]] / sqrt(2); weight on the own token is sigmoid(1/sqrt(2))
    let s = 1.0 / (1.0 + (-1.0 / 2f64.sqrt()).exp());
    let want = [s, 1.0 - s, 1.0 - s, s];
    for (o, w) in out.iter().zip(want) {
        assert!((o - w).abs() < 1e-12, "{out:?} vs {want:?}");
    }
}

#[test]
fn two_token_disentangled_attention_matches_three_term_logits() {
    let (enc, mut store) = identity_attention(AttentionKind::Disentangled, 2, 1);
    let rel = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
    set(&mut store, "rel_emb", &[3, 2], &rel);
    let h = [1.0, 0.5, -0.5, 2.0];
    let out = attention_out(&enc, &store, &h, &[1, 2, 2], &[true, true]);

    let x = |i: usize| &h[2 * i..2 * i + 2];
    let r = |m: usize| &rel[2 * m..2 * m + 2];
    // clipped distance i - j shifted into [0, 2k]
    let delta = |i: usize, j: usize| ((i as isize - j as isize).clamp(-1, 1) + 1) as usize;
    let mut want = vec![0.0; 4];
    for i in 0..2 {
        let logits: Vec<f64> = (0..2)
            .map(|j| {
                (dot(x(i), x(j)) + dot(x(i), r(delta(i, j))) + dot(x(j), r(delta(j, i))))
                    / 6f64.sqrt()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            let w = l.exp() / z;
            for c in 0..2 {
                want[2 * i + c] += w * x(j)[c];
            }
        }
    }
    for (o, w) in out.iter().zip(&want) {
        assert!((o - w).abs() < 1e-12, "{out:?} vs {want:?}");
    }
}

#[test]
fn single_token_attends_to_itself() {
    for kind in [AttentionKind::Absolute, AttentionKind::Disentangled] {
        let enc = Encoder::new(cfg(kind, 1, 2, 4, 2), "").unwrap();
        let store = init(&enc, 3);
        let h = [0.3, -1.0, 0.25, 0.8];
        let out = attention_out(&enc, &store, &h, &[1, 1, 4], &[true]);
        let lin = |x: &[f64], w: &str, b: &str| -> Vec<f64> {
            let w = store.get(w).unwrap().to_f64_vec();
            let b = store.get(b).unwrap().to_f64_vec();
            (0..4)
                .map(|c| b[c] + (0..4).map(|r| x[r] * w[r * 4 + c]).sum::<f64>())
                .collect()
        };
        let want = lin(&lin(&h, "l0.wv.w", "l0.wv.b"), "l0.wo.w", "l0.wo.b");
        for (o, w) in out.iter().zip(&want) {
            assert!((o - w).abs() < 1e-12, "{kind:?}");
        }
    }
}

#[test]
fn relative_index_is_clipped_distance() {
    let idx = relative_index(5, 2);
    for i in 0..5 {
        for j in 0..5 {
            let d = (i as isize - j as isize).clamp(-2, 2) + 2;
            assert_eq!(idx[i * 5 + j], d as usize);
        }
    }
}

fn batch(ids: Vec<u32>, b: usize, t: usize) -> TokenBatch {
    TokenBatch::new(ids, b, t).unwrap()
}

fn forward(enc: &Encoder, store: &ParamStore<f64>, tb: &TokenBatch) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let mut r = rng::stream(0, 0);
    let mut f = Fwd::new(&mut g, store, &mut r);
    let h = enc.forward(&mut f, tb).unwrap();
    h.0.iter().map(|&v: &Var| g.value(v).to_f64_vec()).collect()
}

#[test]
fn padded_positions_never_leak_into_real_ones() {
    for kind in [AttentionKind::Absolute, AttentionKind::Disentangled] {
        let enc = Encoder::new(cfg(kind, 2, 2, 8, 2), "").unwrap();
        let store = init(&enc, 7);
        let clean = batch(
            vec![CLS, 6, 7, SEP, PAD, PAD, CLS, 8, SEP, PAD, PAD, PAD],
            2,
            6,
        );
        let mut dirty = clean.clone();
        for (id, &m) in dirty.ids.iter_mut().zip(&clean.mask) {
            if !m {
                *id = 9;
            }
        }
        let a = forward(&enc, &store, &clean);
        let b = forward(&enc, &store, &dirty);
        for (la, lb) in a.iter().zip(&b) {
            for (pos, &m) in clean.mask.iter().enumerate() {
                if m {
                    assert_eq!(
                        &la[pos * 8..pos * 8 + 8],
                        &lb[pos * 8..pos * 8 + 8],
                        "{kind:?}"
                    );
                }
            }
        }
    }
}

#[test]
fn zero_relative_embeddings_reduce_to_rescaled_content_attention() {
    let dis = Encoder::new(cfg(AttentionKind::Disentangled, 2, 2, 8, 2), "").unwrap();
    let abs = Encoder::new(cfg(AttentionKind::Absolute, 2, 2, 8, 2), "").unwrap();
    let mut ds = init(&dis, 11);
    set(&mut ds, "rel_emb", &[5, 8], &[0.0; 40]);
    let mut s = init(&abs, 0);
    for (name, p) in ds.iter() {
        if s.contains(name) {
            s.set(name, p.value.clone()).unwrap();
        }
    }
    set(&mut s, "pos_emb", &[16, 8], &[0.0; 128]);
    // fold the extra sqrt(3) of the disentangled scale into the query projection
    for l in 0..2 {
        for part in ["w", "b"] {
            let name = format!("l{l}.wq.{part}");
            let t = ds.get(&name).unwrap();
            let scaled: Vec<f64> = t.to_f64_vec().iter().map(|v| v / 3f64.sqrt()).collect();
            set(&mut s, &name, t.shape(), &scaled);
        }
    }
    let tb = batch(vec![CLS, 6, 7, 8, SEP, PAD], 1, 6);
    let a = forward(&abs, &s, &tb);
    let d = forward(&dis, &ds, &tb);
    for (la, ld) in a.iter().zip(&d) {
        for (x, y) in la.iter().zip(ld) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn hidden_states_have_one_entry_per_layer_plus_embeddings() {
    for layers in [0, 1, 3] {
        let enc = Encoder::new(cfg(AttentionKind::Absolute, layers, 2, 8, 2), "").unwrap();
        let store = init(&enc, 1);
        let tb = batch(vec![CLS, 6, SEP, CLS, 7, SEP], 2, 3);
        let h = forward(&enc, &store, &tb);
        assert_eq!(h.len(), layers + 1);
        assert!(h.iter().all(|l| l.len() == 2 * 3 * 8));
    }
}

#[test]
fn embed_shape_and_id_range() {
    let mut c = cfg(AttentionKind::Absolute, 1, 2, 8, 2);
    c.max_len = 64;
    let enc = Encoder::new(c, "").unwrap();
    let store: ParamStore<f32> = {
        let mut s = ParamStore::new();
        enc.init(&mut s, &mut rng::stream(0, 1)).unwrap();
        s
    };
    let mut g = Graph::<f32>::new();
    let mut r = rng::stream(0, 0);
    let mut f = Fwd::new(&mut g, &store, &mut r);
    let tb = batch(vec![PAD; 128], 2, 64);
    let h0 = enc.embed(&mut f, &tb).unwrap();
    assert_eq!(f.g.shape(h0), &[2, 64, 8]);
    let bad = batch(vec![CLS, 12, SEP], 1, 3);
    assert!(enc.embed(&mut f, &bad).is_err());
}

#[test]
fn zero_embeddings_give_zero_layer_norm_output() {
    let enc = Encoder::new(cfg(AttentionKind::Disentangled, 0, 2, 8, 2), "").unwrap();
    let mut store = init(&enc, 2);
    set(&mut store, "tok_emb", &[12, 8], &[0.0; 96]);
    let h = forward(&enc, &store, &batch(vec![CLS, 6, SEP], 1, 3));
    assert!(h[0].iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let enc = Encoder::new(cfg(AttentionKind::Disentangled, 2, 2, 8, 2), "").unwrap();
    let tb = batch(vec![CLS, 6, 7, 8, SEP, PAD], 1, 6);
    let a = forward(&enc, &init(&enc, 5), &tb);
    let b = forward(&enc, &init(&enc, 5), &tb);
    let bits =
        |v: &Vec<Vec<f64>>| -> Vec<u64> { v.iter().flatten().map(|x| x.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn training_mode_dropout_is_seeded() {
    let enc = Encoder::new(cfg(AttentionKind::Absolute, 1, 2, 8, 2), "").unwrap();
    let store = init(&enc, 5);
    let tb = batch(vec![CLS, 6, 7, SEP], 1, 4);
    let run = |seed: u64| {
        let mut g = Graph::training();
        let mut r = rng::stream(seed, 9);
        let mut f = Fwd::new(&mut g, &store, &mut r);
        let h = enc.forward(&mut f, &tb).unwrap();
        g.value(h.last()).to_f64_vec()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert_ne!(run(1), forward(&enc, &store, &tb)[1]);
}
