//! Forward-pass context and the small layer helpers shared by the encoder,
//! the heads and the MLM objective.

use edos_numcore::{Graph, ParamStore, Result, RngHandle, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Graph, parameter store and dropout generator for one forward pass.
pub struct Fwd<'a, F: Scalar> {
    pub g: &'a mut Graph<F>,
    pub store: &'a ParamStore<F>,
    pub rng: &'a mut RngHandle,
}

impl<'a, F: Scalar> Fwd<'a, F> {
    pub fn new(g: &'a mut Graph<F>, store: &'a ParamStore<F>, rng: &'a mut RngHandle) -> Self {
        Fwd { g, store, rng }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.g.param(self.store, name)
    }

    /// `x · W + b` with `W` stored as `[d_in, d_out]`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = self.g.matmul(x, w)?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.add(y, b)
    }

    /// `x · W` without bias.
    pub fn project(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(name)?;
        self.g.matmul(x, w)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str, eps: f64) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.g"))?;
        let beta = self.p(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gamma, beta, eps)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        self.g.dropout(x, p, self.rng)
    }

    /// Hidden layers `prefix.{i}` with relu and dropout after each.
    pub fn mlp(&mut self, mut x: Var, prefix: &str, layers: usize, dropout: f64) -> Result<Var> {
        for i in 0..layers {
            x = self.linear(x, &format!("{prefix}.{i}"))?;
            x = self.g.relu(x);
            x = self.dropout(x, dropout);
        }
        Ok(x)
    }
}

pub fn init_normal<F: Scalar>(
    store: &mut ParamStore<F>,
    name: String,
    shape: &[usize],
    rng: &mut RngHandle,
) -> Result<()> {
    store.insert(name, Tensor::randn(shape, INIT_STD, rng))
}

pub fn init_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut RngHandle,
) -> Result<()> {
    init_normal(store, format!("{prefix}.w"), &[d_in, d_out], rng)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))
}

pub fn init_layer_norm<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

/// Hidden layers of an MLP; returns the output width.
pub fn init_mlp<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d_in: usize,
    hidden: &[usize],
    rng: &mut RngHandle,
) -> Result<usize> {
    let mut d = d_in;
    for (i, &h) in hidden.iter().enumerate() {
        init_linear(store, &format!("{prefix}.{i}"), d, h, rng)?;
        d = h;
    }
    Ok(d)
}
