//! Encoder plus matching head plus classifier, and the named-parameter archive.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_slice, Graph, Real, Tensor, Var};
use crate::binio::{put_f32s, put_str, put_u16, put_u32, ByteReader};
use crate::data::{LabelSet, PairExample};
use crate::encoder::{encode, encode_vars, Dropout, EncodedVars, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::matching::{
    class_logits, classify_loss, match_pair, AggFn, MatchConfig, MatchFn, Variant,
};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HWMT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub matching: MatchConfig,
    pub labels: LabelSet,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.matching.validate(&self.encoder)?;
        if self.labels.len() != self.matching.num_classes {
            return Err(Error::config(
                "labels",
                "label count disagrees with num_classes",
            ));
        }
        Ok(())
    }

    /// Keys written to the checkpoint config block. Layer indices are 1-based here.
    pub fn to_kv(&self) -> KvMap {
        let e = &self.encoder;
        let m = &self.matching;
        let mut kv = KvMap::new();
        kv.set("num_layers", e.num_layers);
        kv.set("num_heads", e.num_heads);
        kv.set("head_dim", e.head_dim);
        kv.set("ffn_dim", e.ffn_dim);
        kv.set("max_seq_len", e.max_seq_len);
        kv.set("vocab_size", e.vocab_size);
        kv.set("dropout", e.dropout_rate);
        kv.set("variant", m.variant);
        kv.set("match", m.match_fn);
        kv.set("agg", m.agg_fn);
        kv.set("layers", format_layers(m.layers.as_deref()));
        kv.set("match_hidden", m.match_hidden);
        kv.set("labels", self.labels.names.join(","));
        kv.set("positive_label", &self.labels.names[self.labels.positive]);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let names: Vec<String> = kv
            .require::<String>("labels")?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let positive_name: String = kv.require("positive_label")?;
        let positive = names
            .iter()
            .position(|n| *n == positive_name)
            .ok_or_else(|| {
                Error::config(
                    "positive_label",
                    format!("`{positive_name}` is not among the labels"),
                )
            })?;
        let encoder = EncoderConfig {
            num_layers: kv.require("num_layers")?,
            num_heads: kv.require("num_heads")?,
            head_dim: kv.require("head_dim")?,
            ffn_dim: kv.require("ffn_dim")?,
            max_seq_len: kv.require("max_seq_len")?,
            vocab_size: kv.require("vocab_size")?,
            dropout_rate: kv.parse_or("dropout", 0.0)?,
        };
        let matching = MatchConfig {
            variant: kv.require::<Variant>("variant")?,
            match_fn: kv.require::<MatchFn>("match")?,
            agg_fn: kv.require::<AggFn>("agg")?,
            layers: parse_layers(kv.get("layers").unwrap_or("all"))?,
            match_hidden: kv.require("match_hidden")?,
            num_classes: names.len(),
        };
        let cfg = ModelConfig {
            encoder,
            matching,
            labels: LabelSet::new(names, positive)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `"all"` or a comma list of 1-based layers (`"1,3"`, `"1-4"`) to 0-based indices.
pub fn parse_layers(text: &str) -> Result<Option<Vec<usize>>> {
    let text = text.trim();
    if text.is_empty() || text == "all" {
        return Ok(None);
    }
    let bad = |part: &str| {
        Error::config(
            "layers",
            format!("`{part}` is not a 1-based layer number or range"),
        )
    };
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once(['-', '.']) {
            Some((a, b)) => (a.trim(), b.trim_start_matches('.').trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|_| bad(part))?;
        let hi: usize = hi.parse().map_err(|_| bad(part))?;
        if lo == 0 || hi < lo {
            return Err(bad(part));
        }
        out.extend(lo - 1..hi);
    }
    out.sort_unstable();
    out.dedup();
    Ok(Some(out))
}

pub fn format_layers(layers: Option<&[usize]>) -> String {
    match layers {
        None => "all".into(),
        Some(ls) => ls
            .iter()
            .map(|l| (l + 1).to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    encoder_calls: AtomicU64,
}

/// Forward pass over a batch of pairs.
pub struct BatchForward {
    pub loss: Var,
    pub logits: Var,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ParamStore<T>) -> Self {
        Model {
            config,
            params,
            encoder_calls: AtomicU64::new(0),
        }
    }

    /// Number of sequences this model has run through its encoder.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut params, &mut rng);
        config
            .matching
            .init_params(&config.encoder, &mut params, &mut rng);
        Ok(Model::new(config, params))
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<EncoderOutput<T>> {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        encode(&self.config.encoder, &self.params, tokens)
    }

    pub fn encode_vars<R: Rng>(
        &self,
        g: &mut Graph<T>,
        tokens: &[u32],
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<EncodedVars> {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        encode_vars(g, &self.config.encoder, &self.params, tokens, dropout)
    }

    pub fn pair_repr(&self, g: &mut Graph<T>, a: &EncodedVars, b: &EncodedVars) -> Result<Var> {
        match_pair(g, &self.config.matching, &self.params, a, b)
    }

    /// Encodes both sides of every example and returns the mean loss and the logits.
    pub fn forward_batch<R: Rng>(
        &self,
        g: &mut Graph<T>,
        examples: &[&PairExample],
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<BatchForward> {
        let mut reprs = Vec::with_capacity(examples.len());
        for ex in examples {
            let a = self.encode_vars(
                g,
                &ex.seq_a,
                dropout.as_mut().map(|(rate, rng)| Dropout {
                    rate: *rate,
                    rng: &mut **rng,
                }),
            )?;
            let b = self.encode_vars(
                g,
                &ex.seq_b,
                dropout.as_mut().map(|(rate, rng)| Dropout {
                    rate: *rate,
                    rng: &mut **rng,
                }),
            )?;
            reprs.push(self.pair_repr(g, &a, &b)?);
        }
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let (loss, logits) = classify_loss(g, &self.params, &reprs, &labels)?;
        Ok(BatchForward { loss, logits })
    }

    /// Class probabilities for two already-encoded sequences.
    pub fn score_outputs(&self, a: &EncoderOutput<T>, b: &EncoderOutput<T>) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let a = EncodedVars::from_output(&mut g, a)?;
        let b = EncodedVars::from_output(&mut g, b)?;
        self.probabilities(&mut g, &a, &b)
    }

    /// Class probabilities computed by encoding both token sequences afresh.
    pub fn score_tokens(&self, a: &[u32], b: &[u32]) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let a = self.encode_vars::<ChaCha8Rng>(&mut g, a, None)?;
        let b = self.encode_vars::<ChaCha8Rng>(&mut g, b, None)?;
        self.probabilities(&mut g, &a, &b)
    }

    fn probabilities(&self, g: &mut Graph<T>, a: &EncodedVars, b: &EncodedVars) -> Result<Vec<T>> {
        let repr = self.pair_repr(g, a, b)?;
        let logits = class_logits(g, &self.params, &[repr])?;
        Ok(softmax_slice(g.value(logits).data()).collect())
    }

    /// Serialized checkpoint: magic, version, config block, then named f32 records.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u16(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.config.to_kv().to_text());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data().iter().map(|v| v.as_f32()));
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.bytes(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config = ModelConfig::from_kv(&KvMap::parse(&r.string()?, "checkpoint config block")?)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.f32s(n)?.into_iter().map(|v| T::of(v as f64)).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Corrupt {
                offset: r.offset() as u64,
                message: "trailing bytes".into(),
            });
        }
        let reference = Model::<T>::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "checkpoint lacks parameter `{name}` of shape {:?}",
                        t.shape()
                    )))
                }
            }
        }
        Ok(Model::new(config, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes, binding cached representations to this
    /// exact configuration and set of weights.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_checkpoint_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
