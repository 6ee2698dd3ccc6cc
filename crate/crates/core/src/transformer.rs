//! The multi-layer Transformer shared by the encoder and decoder passes.
//!
//! Blocks follow the post-layer-norm BERT layout: self-attention, residual,
//! layer norm, then a GELU feed-forward, residual, layer norm. In decoder mode
//! a block prepends reused encoder states to its key/value source, so the
//! same weights produce `Q = Y·Wq`, `K = [X̂; Y]·Wk`, `V = [X̂; Y]·Wv`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::param::{ParamId, ParamSet};
use crate::tensor::Scalar;

/// Type id of encoder-side tokens.
pub const ENCODER_TYPE: usize = 0;
/// Type id of decoder-side tokens.
pub const DECODER_TYPE: usize = 1;
pub const NUM_TYPES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Small model used throughout the tests: 2 layers, 2 heads, width 32.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 32,
            ffn_dim: 128,
            vocab_size,
            max_positions: 256,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return bad("ffn_dim, vocab_size and max_positions must be positive".into());
        }
        if !(self.init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            return bad("init_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initialisation of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Parameter handles of the shared Transformer. The values live in a
/// [`ParamSet`] owned by the caller.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    type_emb: ParamId,
    emb_ln_gain: ParamId,
    emb_ln_bias: ParamId,
    layers: Vec<LayerIds>,
}

// Keys carry no bias: a shared shift of every key moves each score row by a
// constant, which softmax ignores, so its gradient is identically zero.
const LAYER_PARAMS: [&str; 15] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "attn.ln.gain", "attn.ln.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ffn.ln.gain",
    "ffn.ln.bias",
];

impl Transformer {
    pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
        let (d, f) = (c.hidden_dim, c.ffn_dim);
        let mut out = vec![
            ParamSpec::new("embeddings.token", &[c.vocab_size, d], Init::Normal),
            ParamSpec::new("embeddings.position", &[c.max_positions, d], Init::Normal),
            ParamSpec::new("embeddings.type", &[NUM_TYPES, d], Init::Normal),
            ParamSpec::new("embeddings.ln.gain", &[d], Init::Ones),
            ParamSpec::new("embeddings.ln.bias", &[d], Init::Zeros),
        ];
        for l in 1..=c.num_layers {
            for name in LAYER_PARAMS {
                let (shape, init) = match name {
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => (vec![d, d], Init::Normal),
                    "ffn.w1" => (vec![d, f], Init::Normal),
                    "ffn.w2" => (vec![f, d], Init::Normal),
                    "ffn.b1" => (vec![f], Init::Zeros),
                    n if n.ends_with("gain") => (vec![d], Init::Ones),
                    _ => (vec![d], Init::Zeros),
                };
                out.push(ParamSpec::new(format!("layer.{l}.{name}"), &shape, init));
            }
        }
        out
    }

    /// Looks up every parameter by name, checking shapes against the config.
    pub fn bind<F: Scalar>(config: &ModelConfig, params: &ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let specs = Self::param_specs(config);
        let ids = lookup(params, &specs)?;
        let mut it = ids.into_iter();
        let mut next = || it.next().expect("one id per spec");
        let (tok_emb, pos_emb, type_emb, emb_ln_gain, emb_ln_bias) =
            (next(), next(), next(), next(), next());
        let layers = (0..config.num_layers)
            .map(|_| LayerIds {
                wq: next(),
                bq: next(),
                wk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        Ok(Transformer {
            config: config.clone(),
            tok_emb,
            pos_emb,
            type_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Sum of token, position and type embeddings, then layer norm.
    pub fn embed_input<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        token_ids: &[usize],
        position_ids: &[usize],
        type_ids: &[usize],
    ) -> Result<Var> {
        let n = token_ids.len();
        if position_ids.len() != n || type_ids.len() != n {
            return Err(Error::shape(
                "embed_input",
                &[n],
                &[position_ids.len(), type_ids.len()],
            ));
        }
        if n == 0 {
            return Err(Error::Contract("embed_input of an empty sequence".into()));
        }
        let (tok, pos, typ) = (g.param(self.tok_emb), g.param(self.pos_emb), g.param(self.type_emb));
        let t = g.embedding(tok, token_ids, "token")?;
        let p = g.embedding(pos, position_ids, "position")?;
        let y = g.embedding(typ, type_ids, "type")?;
        let sum = g.add(t, p)?;
        let sum = g.add(sum, y)?;
        let (gain, bias) = (g.param(self.emb_ln_gain), g.param(self.emb_ln_bias));
        g.layer_norm(sum, gain, bias, self.config.layer_norm_eps)
    }

    fn linear<F: Scalar>(g: &mut Graph<'_, F>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Multi-head attention of layer `l` (1-based): queries from `query_src`,
    /// keys and values from `kv_src`, visibility from `mask`.
    pub fn attention<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        l: usize,
        query_src: Var,
        kv_src: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let w = self.layer(l)?;
        let (nq, nk) = (g.value(query_src).rows(), g.value(kv_src).rows());
        if mask.shape() != [nq, nk] {
            return Err(Error::shape("attention", &[nq, nk], &mask.shape()));
        }
        let q = Self::linear(g, query_src, w.wq, w.bq)?;
        let wk = g.param(w.wk);
        let k = g.matmul(kv_src, wk)?;
        let v = Self::linear(g, kv_src, w.wv, w.bv)?;
        let dk = self.config.head_dim();
        let scale = F::lit(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, mask)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let concat = g.concat_cols(&heads)?;
        Self::linear(g, concat, w.wo, w.bo)
    }

    /// One block `Trans^l`. With `kv_override`, those rows are prepended to the
    /// key/value source and `mask` must cover `[override; hidden]` columns.
    pub fn transformer_block<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        l: usize,
        hidden: Var,
        kv_override: Option<Var>,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let w = self.layer(l)?.clone();
        let kv = match kv_override {
            Some(reused) => g.concat_rows(&[reused, hidden])?,
            None => hidden,
        };
        let attn = self.attention(g, l, hidden, kv, mask)?;
        let res = g.add(hidden, attn)?;
        let (g1, b1) = (g.param(w.ln1_gain), g.param(w.ln1_bias));
        let h1 = g.layer_norm(res, g1, b1, self.config.layer_norm_eps)?;
        let ff = Self::linear(g, h1, w.w1, w.b1)?;
        let ff = g.gelu(ff);
        let ff = Self::linear(g, ff, w.w2, w.b2)?;
        let res = g.add(h1, ff)?;
        let (g2, b2) = (g.param(w.ln2_gain), g.param(w.ln2_bias));
        g.layer_norm(res, g2, b2, self.config.layer_norm_eps)
    }

    /// Runs every block under one mask, returning `X^0..X^L`.
    pub fn run_layers<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x0: Var,
        mask: &AttentionMask,
    ) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.config.num_layers + 1);
        states.push(x0);
        for l in 1..=self.config.num_layers {
            let prev = *states.last().expect("non-empty");
            states.push(self.transformer_block(g, l, prev, None, mask)?);
        }
        Ok(states)
    }

    fn layer(&self, l: usize) -> Result<&LayerIds> {
        if l == 0 || l > self.layers.len() {
            return Err(Error::Contract(format!(
                "layer index {l} outside [1, {}]",
                self.layers.len()
            )));
        }
        Ok(&self.layers[l - 1])
    }
}

/// Creates parameters for `specs` in order.
pub fn init_params<F: Scalar, R: Rng>(
    params: &mut ParamSet<F>,
    specs: &[ParamSpec],
    std: f64,
    rng: &mut R,
) -> Result<()> {
    for s in specs {
        match s.init {
            Init::Normal => params.add_normal(s.name.clone(), &s.shape, std, rng)?,
            Init::Zeros => params.add_constant(s.name.clone(), &s.shape, 0.0)?,
            Init::Ones => params.add_constant(s.name.clone(), &s.shape, 1.0)?,
        };
    }
    Ok(())
}

/// Resolves `specs` to ids, failing on a missing name or a shape mismatch.
pub fn lookup<F: Scalar>(params: &ParamSet<F>, specs: &[ParamSpec]) -> Result<Vec<ParamId>> {
    specs
        .iter()
        .map(|s| {
            let id = params
                .id(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", s.name)))?;
            let shape = params.get(id).shape();
            if shape != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {shape:?}, expected {:?}",
                    s.name, s.shape
                )));
            }
            Ok(id)
        })
        .collect()
}
