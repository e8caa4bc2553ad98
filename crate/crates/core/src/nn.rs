//! Layers shared by the condition adapter, MAE, DenoiseNet and
//! reconstruction adapter.
//!
//! Layers hold only [`ParamId`]s; values live in the bundle's
//! [`ParamStore`]. Construction goes through a [`ParamBuilder`], which
//! either creates a parameter or reuses one already present under the same
//! name (the checkpoint-loading path).

use std::cell::RefCell;

use ltm3d_autograd::{Init, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    problems: &'a RefCell<Vec<String>>,
}

/// Runs `f` against a builder rooted at `store` and reports any parameter
/// whose stored shape disagrees with the one requested.
pub fn build_params<T>(store: &mut ParamStore, seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> Result<T> {
    let problems = RefCell::new(Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = {
        let mut b = ParamBuilder { store, rng: &mut rng, prefix: String::new(), problems: &problems };
        f(&mut b)
    };
    let problems = problems.into_inner();
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Shape(problems.join("; ")))
    }
}

impl ParamBuilder<'_> {
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix: format!("{}{}/", self.prefix, name),
            problems: self.problems,
        }
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let full = format!("{}{}", self.prefix, name);
        let rng = &mut *self.rng;
        let id = self.store.get_or_insert(&full, || init.build(rows, cols, rng));
        let dim = self.store.get(id).dim();
        if dim != (rows, cols) {
            self.problems.borrow_mut().push(format!("{full}: stored {dim:?}, expected ({rows}, {cols})"));
        }
        id
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(b, in_dim, out_dim, bias, Init::XavierUniform)
    }

    pub fn with_init(b: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Self {
        let w = b.param("w", in_dim, out_dim, init);
        let bias = bias.then(|| b.param("b", 1, out_dim, Init::Zeros));
        Self { w, b: bias }
    }

    pub fn forward<'t, 'p>(&self, x: Var<'t, 'p>) -> Var<'t, 'p> {
        let tape = x.tape();
        let y = x.matmul(tape.param(self.w));
        match self.b {
            Some(b) => y.add_row(tape.param(b)),
            None => y,
        }
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self { gamma: b.param("gamma", 1, dim, Init::Ones), beta: b.param("beta", 1, dim, Init::Zeros) }
    }

    pub fn forward<'t, 'p>(&self, x: Var<'t, 'p>) -> Var<'t, 'p> {
        let tape = x.tape();
        x.layer_norm(LN_EPS).mul_row(tape.param(self.gamma)).add_row(tape.param(self.beta))
    }
}

/// Multi-head scaled dot-product attention without positional terms.
/// Queries come from one sequence, keys and values from another (the same
/// one for self-attention). Output width equals the query width.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&mut b.sub("q"), dim, dim, true),
            k: Linear::new(&mut b.sub("k"), kv_dim, dim, true),
            v: Linear::new(&mut b.sub("v"), kv_dim, dim, true),
            o: Linear::new(&mut b.sub("o"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward<'t, 'p>(&self, queries: Var<'t, 'p>, context: Var<'t, 'p>) -> Var<'t, 'p> {
        let q = self.q.forward(queries);
        let k = self.k.forward(context);
        let v = self.v.forward(context);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let attend = |q: Var<'t, 'p>, k: Var<'t, 'p>, v: Var<'t, 'p>| q.matmul_t(k).scale(scale).softmax_rows().matmul(v);
        let merged = if self.heads == 1 {
            attend(q, k, v)
        } else {
            let heads: Vec<_> = (0..self.heads)
                .map(|h| {
                    let (a, b) = (h * head_dim, (h + 1) * head_dim);
                    attend(q.slice_cols(a, b), k.slice_cols(a, b), v.slice_cols(a, b))
                })
                .collect();
            q.tape().concat_cols(&heads)
        };
        self.o.forward(merged)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Self {
        Self { fc1: Linear::new(&mut b.sub("fc1"), dim, hidden, true), fc2: Linear::new(&mut b.sub("fc2"), hidden, dim, true) }
    }

    pub fn forward<'t, 'p>(&self, x: Var<'t, 'p>) -> Var<'t, 'p> {
        self.fc2.forward(self.fc1.forward(x).gelu())
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), dim),
            attn: Attention::new(&mut b.sub("attn"), dim, dim, heads),
            norm2: LayerNorm::new(&mut b.sub("norm2"), dim),
            mlp: Mlp::new(&mut b.sub("mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<'t, 'p>(&self, x: Var<'t, 'p>) -> Var<'t, 'p> {
        let h = self.norm1.forward(x);
        let x = x.add(self.attn.forward(h, h));
        x.add(self.mlp.forward(self.norm2.forward(x)))
    }
}

/// Stack of [`Block`]s named `0`, `1`, ...
pub fn blocks(b: &mut ParamBuilder<'_>, depth: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Vec<Block> {
    (0..depth).map(|i| Block::new(&mut b.sub(&i.to_string()), dim, heads, mlp_ratio)).collect()
}
