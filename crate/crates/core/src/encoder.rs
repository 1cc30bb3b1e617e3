//! Post-norm multi-head self-attention encoder that exposes, per layer, each
//! head's output at the classification position alongside the usual hidden
//! states and attention maps.

use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};
use crate::data::{CLS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::params::{add_affine, filled, truncated_normal, ParamStore, INIT_STD};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Width of the hidden state, `num_heads * head_dim`.
    pub fn hidden_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if self.vocab_size <= CLS_ID as usize {
            return Err(Error::config("vocab_size", "must cover the reserved ids"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn init_params<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let h = self.hidden_dim();
        store.insert(
            "enc.tok_emb",
            truncated_normal(rng, vec![self.vocab_size, h], INIT_STD),
        );
        store.insert(
            "enc.pos_emb",
            truncated_normal(rng, vec![self.max_seq_len, h], INIT_STD),
        );
        for l in 0..self.num_layers {
            for i in 0..self.num_heads {
                for w in ["wq", "wk", "wv"] {
                    store.insert(
                        format!("enc.l{l}.h{i}.{w}"),
                        truncated_normal(rng, vec![h, self.head_dim], INIT_STD),
                    );
                }
            }
            add_affine(store, rng, &format!("enc.l{l}.out"), h, h);
            store.insert(format!("enc.l{l}.ln1.g"), filled(vec![h], 1.0));
            store.insert(format!("enc.l{l}.ln1.b"), filled(vec![h], 0.0));
            add_affine(store, rng, &format!("enc.l{l}.ff1"), h, self.ffn_dim);
            add_affine(store, rng, &format!("enc.l{l}.ff2"), self.ffn_dim, h);
            store.insert(format!("enc.l{l}.ln2.g"), filled(vec![h], 1.0));
            store.insert(format!("enc.l{l}.ln2.b"), filled(vec![h], 0.0));
        }
    }

    /// Closed-form encoder parameter count.
    pub fn param_count(&self) -> usize {
        let (h, d, f) = (self.hidden_dim(), self.head_dim, self.ffn_dim);
        let per_layer =
            3 * self.num_heads * h * d + (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        self.vocab_size * h + self.max_seq_len * h + self.num_layers * per_layer
    }
}

/// Dropout source for training-mode forward passes.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let n = g.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    T::zero()
                } else {
                    T::of(keep)
                }
            })
            .collect();
        let m = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
        g.mul(x, m)
    }
}

fn maybe_dropout<T: Real, R: Rng>(
    dropout: &mut Option<Dropout<'_, R>>,
    g: &mut Graph<T>,
    x: Var,
) -> Result<Var, TensorError> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// Embedded input sequence.
pub struct Embedded {
    pub hidden: Var,
    /// Token ids actually used, after truncation.
    pub tokens: Vec<u32>,
    pub truncated: bool,
}

/// Token embedding plus learned position embedding.
pub fn embed<T: Real>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    tokens: &[u32],
) -> Result<Embedded> {
    if tokens.first() != Some(&CLS_ID) {
        return Err(Error::Input("sequence must start with the CLS id".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} is outside the vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let truncated = tokens.len() > cfg.max_seq_len;
    let tokens: Vec<u32> = tokens.iter().take(cfg.max_seq_len).copied().collect();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.param(params, "enc.tok_emb")?;
    let pos = g.param(params, "enc.pos_emb")?;
    let te = g.gather_rows(tok, &ids)?;
    let pe = g.gather_rows(pos, &positions)?;
    Ok(Embedded {
        hidden: g.add(te, pe)?,
        tokens,
        truncated,
    })
}

/// One attention head: `softmax(Q K^T / sqrt(d) + mask) V`. Columns where `mask` is
/// false are excluded from every row. Returns the head output and the attention
/// weights (before dropout).
pub fn attention_head<T: Real, R: Rng>(
    g: &mut Graph<T>,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    mask: &[bool],
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<(Var, Var), TensorError> {
    let seq_len = g.shape(h)[0];
    if mask.len() != seq_len {
        return Err(TensorError::Dimension(format!(
            "mask of length {} for {seq_len} positions",
            mask.len()
        )));
    }
    let d = g.shape(wq)[1];
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, T::one() / T::of(d as f64).sqrt())?;
    if mask.iter().any(|&m| !m) {
        let row: Vec<T> = mask
            .iter()
            .map(|&m| if m { T::zero() } else { T::neg_infinity() })
            .collect();
        let bias = Tensor::new(vec![seq_len, seq_len], row.repeat(seq_len))?;
        let bias = g.constant(bias);
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax_rows(scores)?;
    let dropped = maybe_dropout(dropout, g, weights)?;
    let head = g.matmul(dropped, v)?;
    Ok((head, weights))
}

/// Result of one encoder layer.
pub struct LayerVars {
    pub output: Var,
    /// Per-head outputs, captured before concatenation and the output map.
    pub heads: Vec<Var>,
    pub weights: Vec<Var>,
    /// The output map applied to the concatenated heads, before the residual.
    pub projected: Var,
}

pub fn multi_head_layer<T: Real, R: Rng>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    layer: usize,
    h: Var,
    mask: &[bool],
    dropout: &mut Option<Dropout<'_, R>>,
) -> Result<LayerVars, TensorError> {
    let mut heads = Vec::with_capacity(cfg.num_heads);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let wq = g.param(params, &format!("enc.l{layer}.h{i}.wq"))?;
        let wk = g.param(params, &format!("enc.l{layer}.h{i}.wk"))?;
        let wv = g.param(params, &format!("enc.l{layer}.h{i}.wv"))?;
        let (head, w) = attention_head(g, h, wq, wk, wv, mask, dropout)?;
        heads.push(head);
        weights.push(w);
    }
    let p = |name: &str| format!("enc.l{layer}.{name}");
    let concat = g.concat_last(&heads)?;
    let (ow, ob) = (g.param(params, &p("out.w"))?, g.param(params, &p("out.b"))?);
    let projected = g.affine(concat, ow, ob)?;
    let x = maybe_dropout(dropout, g, projected)?;
    let x = g.add(h, x)?;
    let (g1, b1) = (g.param(params, &p("ln1.g"))?, g.param(params, &p("ln1.b"))?);
    let x = g.layer_norm(x, g1, b1, T::of(LN_EPS))?;

    let (w1, b1) = (g.param(params, &p("ff1.w"))?, g.param(params, &p("ff1.b"))?);
    let ff = g.affine(x, w1, b1)?;
    let ff = g.relu(ff)?;
    let (w2, b2) = (g.param(params, &p("ff2.w"))?, g.param(params, &p("ff2.b"))?);
    let ff = g.affine(ff, w2, b2)?;
    let ff = maybe_dropout(dropout, g, ff)?;
    let x = g.add(x, ff)?;
    let (g2, b2) = (g.param(params, &p("ln2.g"))?, g.param(params, &p("ln2.b"))?);
    let output = g.layer_norm(x, g2, b2, T::of(LN_EPS))?;
    Ok(LayerVars {
        output,
        heads,
        weights,
        projected,
    })
}

/// Graph handles for a full encoder pass over one sequence.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    /// `[layer][head]`, each `[1, head_dim]`: row 0 of the head output.
    pub head_vectors: Vec<Vec<Var>>,
    /// `[layer]`, each `[1, hidden_dim]`: row 0 of the layer output.
    pub cls_vectors: Vec<Var>,
    /// `[layer][head]`, each `[seq_len, seq_len]`. Empty when rebuilt from a cache.
    pub attention: Vec<Vec<Var>>,
    /// `[layer]`, the output map before the residual. Empty when rebuilt from a cache.
    pub projected: Vec<Var>,
    pub truncated: bool,
}

impl EncodedVars {
    /// Places precomputed vectors on a graph as constants.
    pub fn from_output<T: Real>(
        g: &mut Graph<T>,
        out: &EncoderOutput<T>,
    ) -> Result<Self, TensorError> {
        let head_vectors = out
            .head_vectors
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|v| Ok(g.constant(Tensor::row_vector(v.clone())?)))
                    .collect()
            })
            .collect::<Result<_, TensorError>>()?;
        let cls_vectors = out
            .cls_vectors
            .iter()
            .map(|v| Ok(g.constant(Tensor::row_vector(v.clone())?)))
            .collect::<Result<_, TensorError>>()?;
        Ok(EncodedVars {
            head_vectors,
            cls_vectors,
            attention: Vec::new(),
            projected: Vec::new(),
            truncated: false,
        })
    }

    pub fn to_output<T: Real>(&self, g: &Graph<T>) -> EncoderOutput<T> {
        EncoderOutput {
            head_vectors: self
                .head_vectors
                .iter()
                .map(|layer| layer.iter().map(|&v| g.value(v).data().to_vec()).collect())
                .collect(),
            cls_vectors: self
                .cls_vectors
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect(),
            attention: self
                .attention
                .iter()
                .map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect())
                .collect(),
        }
    }
}

/// Runs every layer on `tokens`. Positions holding the PAD id are masked as keys.
pub fn encode_vars<T: Real, R: Rng>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    tokens: &[u32],
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<EncodedVars> {
    let emb = embed(g, cfg, params, tokens)?;
    let mask: Vec<bool> = emb.tokens.iter().map(|&t| t != PAD_ID).collect();
    let mut h = maybe_dropout(&mut dropout, g, emb.hidden)?;
    let mut out = EncodedVars {
        head_vectors: Vec::with_capacity(cfg.num_layers),
        cls_vectors: Vec::with_capacity(cfg.num_layers),
        attention: Vec::with_capacity(cfg.num_layers),
        projected: Vec::with_capacity(cfg.num_layers),
        truncated: emb.truncated,
    };
    for l in 0..cfg.num_layers {
        let layer = multi_head_layer(g, cfg, params, l, h, &mask, &mut dropout)?;
        let hv = layer
            .heads
            .iter()
            .map(|&head| g.select_row(head, 0))
            .collect::<Result<Vec<_>, _>>()?;
        out.head_vectors.push(hv);
        out.cls_vectors.push(g.select_row(layer.output, 0)?);
        out.attention.push(layer.weights);
        out.projected.push(layer.projected);
        h = layer.output;
    }
    Ok(out)
}

/// Per-layer, per-head classification-position vectors and attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub head_vectors: Vec<Vec<Vec<T>>>,
    pub cls_vectors: Vec<Vec<T>>,
    pub attention: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> EncoderOutput<T> {
    pub fn num_layers(&self) -> usize {
        self.head_vectors.len()
    }

    pub fn num_heads(&self) -> usize {
        self.head_vectors.first().map_or(0, Vec::len)
    }

    pub fn head_dim(&self) -> usize {
        self.head_vectors
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len)
    }
}

/// Inference-mode encoding (no dropout, nothing recorded for backward).
pub fn encode<T: Real>(
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    tokens: &[u32],
) -> Result<EncoderOutput<T>> {
    let mut g = Graph::inference();
    let vars = encode_vars::<T, rand_chacha::ChaCha8Rng>(&mut g, cfg, params, tokens, None)?;
    Ok(vars.to_output(&g))
}
