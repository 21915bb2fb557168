//! Finite-difference verification of every trainable block at small random
//! shapes, in 64-bit precision with dropout off.

use rand::Rng;

use crate::encoder::{AttentionKind, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadVariant, ModelBundle};
use crate::nn::{init_linear, init_normal, Fwd};
use crate::pretrain::{mask_tokens, MlmModel};
use crate::tokenizer::{TokenBatch, CLS, NUM_SPECIAL, PAD, SEP};
use edos_numcore::rng::{self, RngHandle};
use edos_numcore::{grad_check_with, Graph, NumError, ParamStore, Stencil, Tensor, Var};

/// Step of the fourth-order central differences. The two-point stencil
/// at `1e-5` leaves about `1e-11` of round-off in each difference, which is
/// larger than the relative tolerance allows for coordinates whose gradient
/// is below `1e-7`; this stencil at `3e-4` brings it below `1e-12`.
pub const STEP: f64 = 3e-4;

/// Head draws with a relu input closer than this to zero are redrawn, as
/// the stencil could straddle the kink.
pub const RELU_MARGIN: f64 = 1e-2;

const MAX_REDRAWS: u64 = 100;

/// Spread of the noise added to every parameter before a check.
pub const JITTER: f64 = 0.2;

/// Block names in the order [`check_all`] reports them.
pub const BLOCKS: [&str; 13] = [
    "attention/absolute",
    "attention/disentangled",
    "ffn",
    "layer_norm",
    "encoder/absolute",
    "encoder/disentangled",
    "head/LastLayerMLP",
    "head/AvgLayersMLP",
    "head/DualConcatMLP",
    "head/DualMLPConcatMLP",
    "mlm_head",
    "cross_entropy",
    "cross_entropy/weighted",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: &'static str,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
}

/// Toy shapes drawn from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shapes {
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub clip: usize,
}

impl Shapes {
    pub fn draw(r: &mut RngHandle) -> Self {
        let d_model = [4, 6, 8][r.random_range(0..3)];
        let heads: Vec<usize> = (1..=2).filter(|h| d_model % h == 0).collect();
        Shapes {
            batch: r.random_range(1..=2),
            len: r.random_range(3..=5),
            d_model,
            n_heads: heads[r.random_range(0..heads.len())],
            d_ff: r.random_range(3..=8),
            vocab: r.random_range(8..=12),
            clip: r.random_range(1..=3),
        }
    }

    fn encoder(&self, kind: AttentionKind, layers: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size: self.vocab,
            max_len: 8,
            attention: kind,
            relative_clip: self.clip,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    /// Rows `[CLS] w… [SEP]` where every row after the first is one token
    /// shorter and padded, so masking is exercised whenever `batch > 1`.
    fn tokens(&self, r: &mut RngHandle) -> TokenBatch {
        let mut ids = Vec::with_capacity(self.batch * self.len);
        for b in 0..self.batch {
            let used = (self.len - b.min(1)).max(2);
            ids.push(CLS);
            for _ in 1..used - 1 {
                ids.push(r.random_range(NUM_SPECIAL..self.vocab as u32));
            }
            ids.push(SEP);
            ids.extend(std::iter::repeat_n(PAD, self.len - used));
        }
        TokenBatch::new(ids, self.batch, self.len).expect("consistent shape")
    }
}

fn external(e: Error) -> NumError {
    match e {
        Error::Num(n) => n,
        other => NumError::External(other.to_string()),
    }
}

/// Moves every parameter away from its initialisation. Matrices get noise
/// of spread `1/sqrt(fan_in)` so every layer has roughly unit gain; with the
/// small training initialisation most encoder gradients fall below what
/// central differences resolve in 64-bit arithmetic. Vectors (biases and
/// layer-norm affines) get [`JITTER`].
fn jitter(store: &mut ParamStore<f64>, r: &mut RngHandle) {
    for (_, p) in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let std = match shape.as_slice() {
            [fan_in, _] => 1.0 / (*fan_in as f64).sqrt(),
            _ => JITTER,
        };
        let noise = Tensor::<f64>::randn(&shape, std, r);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

/// `sum(out ∘ w)` for a fixed random `w`, a scalar with a generic gradient.
fn project_out(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> edos_numcore::Result<Var> {
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check<L>(block: &'static str, seed: u64, store: &ParamStore<f64>, loss: L) -> Result<BlockCheck>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> edos_numcore::Result<Var> + Sync + Send,
{
    let rep = grad_check_with(store, loss, STEP, Stencil::FourthOrder)?;
    Ok(BlockCheck {
        block,
        seed,
        coordinates: rep.coordinates,
        max_rel_error: rep.max_rel_error,
        worst_pair: rep
            .worst
            .as_ref()
            .map_or((0.0, 0.0), |w| (w.analytic, w.numeric)),
        worst_param: rep.worst.map(|w| w.param).unwrap_or_default(),
    })
}

fn attention_block(kind: AttentionKind, block: &'static str, seed: u64) -> Result<BlockCheck> {
    let mut r = rng::stream(seed, rng::stream_id(block));
    let s = Shapes::draw(&mut r);
    let enc = Encoder::new(s.encoder(kind, 1), "")?;
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut r)?;
    jitter(&mut store, &mut r);
    let shape = [s.batch, s.len, s.d_model];
    let x = Tensor::<f64>::randn(&shape, 1.0, &mut r);
    let w = Tensor::<f64>::randn(&shape, 1.0, &mut r);
    let mask = s.tokens(&mut r).mask;
    check(block, seed, &store, |g, st| {
        let mut unused = rng::stream(0, 0);
        let mut f = Fwd::new(g, st, &mut unused);
        let h = f.g.constant(x.clone());
        let out = enc.attention(&mut f, 0, h, &mask).map_err(external)?;
        project_out(f.g, out, &w)
    })
}

fn ffn_block(seed: u64) -> Result<BlockCheck> {
    let block = "ffn";
    let mut r = rng::stream(seed, rng::stream_id(block));
    let s = Shapes::draw(&mut r);
    let mut store = ParamStore::new();
    init_linear(&mut store, "ff1", s.d_model, s.d_ff, &mut r)?;
    init_linear(&mut store, "ff2", s.d_ff, s.d_model, &mut r)?;
    jitter(&mut store, &mut r);
    let shape = [s.batch, s.len, s.d_model];
    let x = Tensor::<f64>::randn(&shape, 1.0, &mut r);
    let w = Tensor::<f64>::randn(&shape, 1.0, &mut r);
    check(block, seed, &store, |g, st| {
        let mut unused = rng::stream(0, 0);
        let mut f = Fwd::new(g, st, &mut unused);
        let h = f.g.constant(x.clone());
        let a = f.linear(h, "ff1")?;
        let a = f.g.gelu(a);
        let out = f.linear(a, "ff2")?;
        project_out(f.g, out, &w)
    })
}

fn layer_norm_block(seed: u64) -> Result<BlockCheck> {
    let block = "layer_norm";
    let mut r = rng::stream(seed, rng::stream_id(block));
    let s = Shapes::draw(&mut r);
    let d = s.d_model.max(3);
    let mut store = ParamStore::new();
    init_normal(&mut store, "x".into(), &[s.batch, s.len, d], &mut r)?;
    store.insert("ln.g", Tensor::ones(&[d]))?;
    store.insert("ln.b", Tensor::zeros(&[d]))?;
    jitter(&mut store, &mut r);
    let w = Tensor::<f64>::randn(&[s.batch, s.len, d], 1.0, &mut r);
    check(block, seed, &store, |g, st| {
        let mut unused = rng::stream(0, 0);
        let mut f = Fwd::new(g, st, &mut unused);
        let x = f.p("x")?;
        let out = f.layer_norm(x, "ln", 1e-5)?;
        project_out(f.g, out, &w)
    })
}

fn encoder_block(kind: AttentionKind, block: &'static str, seed: u64) -> Result<BlockCheck> {
    let mut r = rng::stream(seed, rng::stream_id(block));
    let s = Shapes::draw(&mut r);
    let enc = Encoder::new(s.encoder(kind, 2), "")?;
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut r)?;
    jitter(&mut store, &mut r);
    let tokens = s.tokens(&mut r);
    let w = Tensor::<f64>::randn(&[s.batch, s.len, s.d_model], 1.0, &mut r);
    check(block, seed, &store, |g, st| {
        let mut unused = rng::stream(0, 0);
        let mut f = Fwd::new(g, st, &mut unused);
        let h = enc.forward(&mut f, &tokens).map_err(external)?;
        project_out(f.g, h.last(), &w)
    })
}

fn head_block(variant: HeadVariant, block: &'static str, seed: u64) -> Result<BlockCheck> {
    for attempt in 0..MAX_REDRAWS {
        let mut r = rng::stream(seed, rng::stream_id(block).wrapping_add(attempt));
        let s = Shapes::draw(&mut r);
        let k = [2, 4, 5, 11][r.random_range(0..4)];
        let head = HeadConfig {
            variant,
            branch_hidden: vec![r.random_range(6..=12)],
            trunk_hidden: vec![r.random_range(6..=12)],
            num_classes: k,
            dropout: 0.1,
            pooling: Default::default(),
        };
        let b = variant
            .is_dual()
            .then(|| s.encoder(AttentionKind::Disentangled, 1));
        let bundle = ModelBundle::new(s.encoder(AttentionKind::Absolute, 1), b, head)?;
        let mut store = bundle.init::<f64>(&mut r)?;
        jitter(&mut store, &mut r);
        let tokens = s.tokens(&mut r);
        let targets: Vec<usize> = (0..s.batch).map(|_| r.random_range(0..k)).collect();
        let loss = |g: &mut Graph<f64>, st: &ParamStore<f64>| {
            let mut unused = rng::stream(0, 0);
            let mut f = Fwd::new(g, st, &mut unused);
            let logits = bundle.logits(&mut f, &tokens).map_err(external)?;
            f.g.cross_entropy(logits, &targets, None)
        };
        let mut probe = Graph::new();
        loss(&mut probe, &store)?;
        if probe.relu_margin().is_some_and(|m| m < RELU_MARGIN) {
            continue;
        }
        return check(block, seed, &store, loss);
    }
    Err(Error::Invalid(format!(
        "{block}: no draw with every relu input at least {RELU_MARGIN} from zero"
    )))
}

fn mlm_block(seed: u64) -> Result<BlockCheck> {
    let block = "mlm_head";
    let mut r = rng::stream(seed, rng::stream_id(block));
    let s = Shapes::draw(&mut r);
    let model = MlmModel::new(s.encoder(AttentionKind::Absolute, 1))?;
    let mut store = model.init::<f64>(&mut r)?;
    jitter(&mut store, &mut r);
    let tokens = s.tokens(&mut r);
    let batch = mask_tokens(&tokens, 1.0, s.vocab, &mut r)?;
    check(block, seed, &store, |g, st| {
        let mut unused = rng::stream(0, 0);
        let mut f = Fwd::new(g, st, &mut unused);
        let loss = model.loss(&mut f, &batch).map_err(external)?;
        loss.ok_or_else(|| NumError::External("no masked positions".into()))
    })
}

fn cross_entropy_block(weighted: bool, block: &'static str, seed: u64) -> Result<BlockCheck> {
    let mut r = rng::stream(seed, rng::stream_id(block));
    let n = r.random_range(1..=6);
    let k = r.random_range(2..=11);
    let mut store = ParamStore::new();
    store.insert("logits", Tensor::<f64>::randn(&[n, k], 2.0, &mut r))?;
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let weights: Option<Vec<f64>> =
        weighted.then(|| (0..k).map(|_| r.random_range(0.2..3.0)).collect());
    check(block, seed, &store, |g, st| {
        let x = g.param(st, "logits")?;
        g.cross_entropy(x, &targets, weights.as_deref())
    })
}

/// Runs one block by name.
pub fn check_block(block: &str, seed: u64) -> Result<BlockCheck> {
    use AttentionKind::{Absolute, Disentangled};
    match block {
        "attention/absolute" => attention_block(Absolute, BLOCKS[0], seed),
        "attention/disentangled" => attention_block(Disentangled, BLOCKS[1], seed),
        "ffn" => ffn_block(seed),
        "layer_norm" => layer_norm_block(seed),
        "encoder/absolute" => encoder_block(Absolute, BLOCKS[4], seed),
        "encoder/disentangled" => encoder_block(Disentangled, BLOCKS[5], seed),
        "head/LastLayerMLP" => head_block(HeadVariant::LastLayerMLP, BLOCKS[6], seed),
        "head/AvgLayersMLP" => head_block(HeadVariant::AvgLayersMLP, BLOCKS[7], seed),
        "head/DualConcatMLP" => head_block(HeadVariant::DualConcatMLP, BLOCKS[8], seed),
        "head/DualMLPConcatMLP" => head_block(HeadVariant::DualMLPConcatMLP, BLOCKS[9], seed),
        "mlm_head" => mlm_block(seed),
        "cross_entropy" => cross_entropy_block(false, BLOCKS[11], seed),
        "cross_entropy/weighted" => cross_entropy_block(true, BLOCKS[12], seed),
        other => Err(Error::Invalid(format!("unknown block `{other}`"))),
    }
}

/// Every block of [`BLOCKS`] at each seed.
pub fn check_all(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<BlockCheck>> {
    let mut out = Vec::new();
    for block in BLOCKS {
        for seed in seeds.clone() {
            out.push(check_block(block, seed)?);
        }
    }
    Ok(out)
}
