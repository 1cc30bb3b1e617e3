//! Head-wise matching of two encoded sequences.
//!
//! Corresponding heads of the two sequences are compared with a match function
//! (cosine, bilinear or element-wise), and the per-head match representations
//! are reduced by an aggregation (max pooling or concatenation followed by an
//! affine map and ReLU). The multi-level variant repeats this for every selected
//! layer, maps each layer's result through a shared affine map, and aggregates
//! across layers. The classic baseline matches the final-layer CLS vectors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Real, TensorError, Var};
use crate::encoder::{EncodedVars, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{add_affine, add_relu_affine, truncated_normal, ParamStore, INIT_STD};

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Classic,
    SingleLevel,
    MultiLevel,
    MultiLevelNoHier,
}

named_enum!(Variant {
    Classic => "classic",
    SingleLevel => "single_level" | "single",
    MultiLevel => "multi_level" | "multi",
    MultiLevelNoHier => "multi_level_no_hier" | "no_hier",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MatchFn {
    Cosine,
    Bilinear,
    Element,
}

named_enum!(MatchFn { Cosine => "cosine", Bilinear => "bilinear", Element => "element" });

impl MatchFn {
    /// Cosine and bilinear produce one number per head pair.
    pub fn is_scalar(self) -> bool {
        !matches!(self, MatchFn::Element)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggFn {
    MaxPool,
    Concat,
}

named_enum!(AggFn { MaxPool => "maxpool" | "max", Concat => "concat" });

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub variant: Variant,
    pub match_fn: MatchFn,
    pub agg_fn: AggFn,
    /// 0-based layer indices in ascending order; `None` selects every layer.
    pub layers: Option<Vec<usize>>,
    /// Output width of the element-wise match transform and of the layer-level maps.
    pub match_hidden: usize,
    pub num_classes: usize,
}

impl MatchConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.match_fn.is_scalar() && self.agg_fn == AggFn::MaxPool {
            return Err(Error::config(
                "agg",
                format!(
                    "{} match produces scalars and can only be aggregated with concat",
                    self.match_fn
                ),
            ));
        }
        if self.match_hidden == 0 {
            return Err(Error::config("match_hidden", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if let Some(layers) = &self.layers {
            if layers.is_empty() {
                return Err(Error::config("layers", "must select at least one layer"));
            }
            if layers.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("layers", "must be strictly increasing"));
            }
            if let Some(&l) = layers.iter().find(|&&l| l >= enc.num_layers) {
                return Err(Error::config(
                    "layers",
                    format!(
                        "layer {} exceeds the {} encoder layers",
                        l + 1,
                        enc.num_layers
                    ),
                ));
            }
        }
        Ok(())
    }

    /// The selected layers, defaulting to all of them.
    pub fn layer_set(&self, num_layers: usize) -> Vec<usize> {
        self.layers
            .clone()
            .unwrap_or_else(|| (0..num_layers).collect())
    }

    /// Width of one head-wise match representation.
    pub fn match_width(&self) -> usize {
        if self.match_fn.is_scalar() {
            1
        } else {
            self.match_hidden
        }
    }

    /// Width of the pair representation fed to the classifier.
    pub fn repr_width(&self) -> usize {
        match self.variant {
            Variant::Classic | Variant::MultiLevel => self.match_hidden,
            Variant::SingleLevel | Variant::MultiLevelNoHier => self.match_width(),
        }
    }

    /// Number of match representations entering the head-level aggregation.
    fn head_agg_inputs(&self, enc: &EncoderConfig) -> usize {
        match self.variant {
            Variant::MultiLevelNoHier => enc.num_heads * self.layer_set(enc.num_layers).len(),
            _ => enc.num_heads,
        }
    }

    pub fn init_params<T: Real, R: Rng>(
        &self,
        enc: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) {
        let d = enc.head_dim;
        let mh = self.match_hidden;
        if self.variant == Variant::Classic {
            add_relu_affine(store, rng, "classic.g", 4 * enc.hidden_dim(), mh);
            add_relu_affine(store, rng, "classic.hidden", mh, mh);
        } else {
            match self.match_fn {
                MatchFn::Cosine => {}
                MatchFn::Bilinear => store.insert(
                    "match.bilinear",
                    truncated_normal(rng, vec![d, d], INIT_STD),
                ),
                MatchFn::Element => add_relu_affine(store, rng, "match.g", 4 * d, mh),
            }
            let mw = self.match_width();
            let rows = match self.agg_fn {
                AggFn::MaxPool => mw,
                AggFn::Concat => mw * self.head_agg_inputs(enc),
            };
            add_relu_affine(store, rng, "agg.head", rows, mw);
            if self.variant == Variant::MultiLevel {
                add_relu_affine(store, rng, "agg.layer_map", mw, mh);
                let rows = match self.agg_fn {
                    AggFn::MaxPool => mh,
                    AggFn::Concat => mh * self.layer_set(enc.num_layers).len(),
                };
                add_relu_affine(store, rng, "agg.layer", rows, mh);
            }
        }
        add_affine(store, rng, "cls", self.repr_width(), self.num_classes);
    }

    /// Closed-form parameter counts of the matching head.
    pub fn param_counts(&self, enc: &EncoderConfig) -> MatchParamCounts {
        let affine = |r: usize, c: usize| r * c + c;
        let (d, mh, mw) = (enc.head_dim, self.match_hidden, self.match_width());
        let mut counts = MatchParamCounts {
            classifier: affine(self.repr_width(), self.num_classes),
            ..Default::default()
        };
        if self.variant == Variant::Classic {
            counts.classic = affine(4 * enc.hidden_dim(), mh) + affine(mh, mh);
            return counts;
        }
        counts.match_fn = match self.match_fn {
            MatchFn::Cosine => 0,
            MatchFn::Bilinear => d * d,
            MatchFn::Element => affine(4 * d, mh),
        };
        counts.head_agg = match self.agg_fn {
            AggFn::MaxPool => affine(mw, mw),
            AggFn::Concat => affine(mw * self.head_agg_inputs(enc), mw),
        };
        if self.variant == Variant::MultiLevel {
            counts.layer_map = affine(mw, mh);
            counts.layer_agg = match self.agg_fn {
                AggFn::MaxPool => affine(mh, mh),
                AggFn::Concat => affine(mh * self.layer_set(enc.num_layers).len(), mh),
            };
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchParamCounts {
    pub match_fn: usize,
    pub head_agg: usize,
    pub layer_map: usize,
    pub layer_agg: usize,
    pub classic: usize,
    pub classifier: usize,
}

impl MatchParamCounts {
    pub fn total(&self) -> usize {
        self.match_fn
            + self.head_agg
            + self.layer_map
            + self.layer_agg
            + self.classic
            + self.classifier
    }
}

/// Cosine similarity of two `[1, n]` vectors as a `[1, 1]` value. A zero-norm
/// input yields 0 and sets the returned degeneracy flag.
pub fn match_cosine<T: Real>(
    g: &mut Graph<T>,
    hs: Var,
    ht: Var,
) -> Result<(Var, bool), TensorError> {
    g.cosine_rows(hs, ht)
}

/// `(hs Wb) . ht`
pub fn match_bilinear<T: Real>(
    g: &mut Graph<T>,
    hs: Var,
    ht: Var,
    wb: Var,
) -> Result<Var, TensorError> {
    let projected = g.matmul(hs, wb)?;
    g.matmul_nt(projected, ht)
}

/// `[hs, ht, hs - ht, hs * ht]`
pub fn element_features<T: Real>(g: &mut Graph<T>, hs: Var, ht: Var) -> Result<Var, TensorError> {
    let diff = g.sub(hs, ht)?;
    let prod = g.mul(hs, ht)?;
    g.concat_last(&[hs, ht, diff, prod])
}

/// `ReLU([hs, ht, hs - ht, hs * ht] W + b)`
pub fn match_element<T: Real>(
    g: &mut Graph<T>,
    hs: Var,
    ht: Var,
    w: Var,
    b: Var,
) -> Result<Var, TensorError> {
    let feats = element_features(g, hs, ht)?;
    let y = g.affine(feats, w, b)?;
    g.relu(y)
}

/// `ReLU(max(m_1..m_n) W + b)`
pub fn agg_maxpool<T: Real>(
    g: &mut Graph<T>,
    ms: &[Var],
    w: Var,
    b: Var,
) -> Result<Var, TensorError> {
    let pooled = g.max_elementwise(ms)?;
    let y = g.affine(pooled, w, b)?;
    g.relu(y)
}

/// `ReLU([m_1, .., m_n] W + b)`
pub fn agg_concat<T: Real>(
    g: &mut Graph<T>,
    ms: &[Var],
    w: Var,
    b: Var,
) -> Result<Var, TensorError> {
    let joined = g.concat_last(ms)?;
    let y = g.affine(joined, w, b)?;
    g.relu(y)
}

fn aggregate<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    agg: AggFn,
    prefix: &str,
    ms: &[Var],
) -> Result<Var, TensorError> {
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    match agg {
        AggFn::MaxPool => agg_maxpool(g, ms, w, b),
        AggFn::Concat => agg_concat(g, ms, w, b),
    }
}

/// Match representations `m_i` of every head of `layer`.
pub fn head_matches<T: Real>(
    g: &mut Graph<T>,
    cfg: &MatchConfig,
    params: &ParamStore<T>,
    a: &EncodedVars,
    b: &EncodedVars,
    layer: usize,
) -> Result<Vec<Var>> {
    let (hs, ht) = match (a.head_vectors.get(layer), b.head_vectors.get(layer)) {
        (Some(x), Some(y)) if x.len() == y.len() => (x, y),
        (Some(_), Some(_)) => {
            return Err(Error::Argument(
                "encodings disagree on the number of heads".into(),
            ))
        }
        _ => return Err(Error::Argument(format!("layer {layer} is out of range"))),
    };
    let mut ms = Vec::with_capacity(hs.len());
    for (&s, &t) in hs.iter().zip(ht) {
        let m = match cfg.match_fn {
            MatchFn::Cosine => match_cosine(g, s, t)?.0,
            MatchFn::Bilinear => {
                let wb = g.param(params, "match.bilinear")?;
                match_bilinear(g, s, t, wb)?
            }
            MatchFn::Element => {
                let w = g.param(params, "match.g.w")?;
                let bias = g.param(params, "match.g.b")?;
                match_element(g, s, t, w, bias)?
            }
        };
        ms.push(m);
    }
    Ok(ms)
}

/// `o = Aggregation(Match(h^s_i, h^t_i) for each head i)` at one layer.
pub fn single_level_match<T: Real>(
    g: &mut Graph<T>,
    cfg: &MatchConfig,
    params: &ParamStore<T>,
    a: &EncodedVars,
    b: &EncodedVars,
    layer: usize,
) -> Result<Var> {
    let ms = head_matches(g, cfg, params, a, b, layer)?;
    Ok(aggregate(g, params, cfg.agg_fn, "agg.head", &ms)?)
}

/// `u = Aggregation(ReLU(o_l W^v + b^v) for each selected layer l)`
pub fn multi_level_match<T: Real>(
    g: &mut Graph<T>,
    cfg: &MatchConfig,
    params: &ParamStore<T>,
    a: &EncodedVars,
    b: &EncodedVars,
) -> Result<Var> {
    let layers = cfg.layer_set(a.head_vectors.len());
    let wv = g.param(params, "agg.layer_map.w")?;
    let bv = g.param(params, "agg.layer_map.b")?;
    let mut vs = Vec::with_capacity(layers.len());
    for l in layers {
        let o = single_level_match(g, cfg, params, a, b, l)?;
        let v = g.affine(o, wv, bv)?;
        vs.push(g.relu(v)?);
    }
    Ok(aggregate(g, params, cfg.agg_fn, "agg.layer", &vs)?)
}

/// All layer-by-head match representations aggregated in a single step.
pub fn no_hier_match<T: Real>(
    g: &mut Graph<T>,
    cfg: &MatchConfig,
    params: &ParamStore<T>,
    a: &EncodedVars,
    b: &EncodedVars,
) -> Result<Var> {
    let mut ms = Vec::new();
    for l in cfg.layer_set(a.head_vectors.len()) {
        ms.extend(head_matches(g, cfg, params, a, b, l)?);
    }
    Ok(aggregate(g, params, cfg.agg_fn, "agg.head", &ms)?)
}

/// Element-wise match of the final-layer CLS vectors followed by one hidden layer.
pub fn classic_match<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    a: &EncodedVars,
    b: &EncodedVars,
) -> Result<Var> {
    let (Some(&s), Some(&t)) = (a.cls_vectors.last(), b.cls_vectors.last()) else {
        return Err(Error::Argument(
            "classic match needs final-layer CLS vectors".into(),
        ));
    };
    let w = g.param(params, "classic.g.w")?;
    let bias = g.param(params, "classic.g.b")?;
    let m = match_element(g, s, t, w, bias)?;
    let w = g.param(params, "classic.hidden.w")?;
    let bias = g.param(params, "classic.hidden.b")?;
    let y = g.affine(m, w, bias)?;
    Ok(g.relu(y)?)
}

/// Pair representation for the configured variant.
pub fn match_pair<T: Real>(
    g: &mut Graph<T>,
    cfg: &MatchConfig,
    params: &ParamStore<T>,
    a: &EncodedVars,
    b: &EncodedVars,
) -> Result<Var> {
    match cfg.variant {
        Variant::Classic => classic_match(g, params, a, b),
        Variant::SingleLevel => {
            let last = *cfg
                .layer_set(a.head_vectors.len())
                .last()
                .expect("validated non-empty");
            single_level_match(g, cfg, params, a, b, last)
        }
        Variant::MultiLevel => multi_level_match(g, cfg, params, a, b),
        Variant::MultiLevelNoHier => no_hier_match(g, cfg, params, a, b),
    }
}

/// Class scores `o . w^f + b^f` for a stack of pair representations.
pub fn class_logits<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    reprs: &[Var],
) -> Result<Var> {
    let stacked = g.concat_rows(reprs)?;
    let w = g.param(params, "cls.w")?;
    let b = g.param(params, "cls.b")?;
    Ok(g.affine(stacked, w, b)?)
}

/// Mean softmax cross-entropy over the given representations.
pub fn classify_loss<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    reprs: &[Var],
    labels: &[usize],
) -> Result<(Var, Var)> {
    let logits = class_logits(g, params, reprs)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    Ok((loss, logits))
}
