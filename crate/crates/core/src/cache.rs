//! Precomputed per-sequence representations and all-pairs scoring from them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::autodiff::Real;
use crate::binio::{put_f32s, put_str, put_u16, put_u32, ByteReader};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::model::{hex, Model};

pub const CACHE_MAGIC: &[u8; 4] = b"HWMC";
pub const CACHE_VERSION: u16 = 1;

/// Head and classification vectors of one sequence, all layers, stored as f32.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedRep {
    pub id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// Layer-major, then head, then component: `k * I * d` values.
    pub head_vectors: Vec<f32>,
    /// Layer-major: `k * I * d` values.
    pub cls_vectors: Vec<f32>,
}

impl CachedRep {
    pub fn from_output<T: Real>(id: impl Into<String>, out: &EncoderOutput<T>) -> Self {
        CachedRep {
            id: id.into(),
            num_layers: out.num_layers(),
            num_heads: out.num_heads(),
            head_dim: out.head_dim(),
            head_vectors: out
                .head_vectors
                .iter()
                .flatten()
                .flatten()
                .map(|v| v.as_f32())
                .collect(),
            cls_vectors: out
                .cls_vectors
                .iter()
                .flatten()
                .map(|v| v.as_f32())
                .collect(),
        }
    }

    /// Rebuilds an encoder output without attention maps.
    pub fn to_output<T: Real>(&self) -> EncoderOutput<T> {
        let d = self.head_dim;
        let h = self.num_heads * d;
        let conv = |xs: &[f32]| xs.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        EncoderOutput {
            head_vectors: self
                .head_vectors
                .chunks(h.max(1))
                .map(|layer| layer.chunks(d.max(1)).map(conv).collect())
                .collect(),
            cls_vectors: self.cls_vectors.chunks(h.max(1)).map(conv).collect(),
            attention: Vec::new(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        let start = out.len();
        put_str(out, &self.id);
        put_u32(out, self.num_layers as u32);
        put_u32(out, self.num_heads as u32);
        put_u32(out, self.head_dim as u32);
        put_f32s(out, self.head_vectors.iter().copied());
        put_f32s(out, self.cls_vectors.iter().copied());
        let crc = crc32fast::hash(&out[start..]);
        put_u32(out, crc);
    }

    fn read(r: &mut ByteReader<'_>, buf: &[u8]) -> Result<Self> {
        let start = r.offset();
        let id = r.string()?;
        let num_layers = r.u32()? as usize;
        let num_heads = r.u32()? as usize;
        let head_dim = r.u32()? as usize;
        let n = num_layers
            .checked_mul(num_heads)
            .and_then(|x| x.checked_mul(head_dim))
            .ok_or(Error::Corrupt {
                offset: start as u64,
                message: "record dimensions overflow".into(),
            })?;
        let head_vectors = r.f32s(n)?;
        let cls_vectors = r.f32s(n)?;
        let end = r.offset();
        let stored = r.u32()?;
        if crc32fast::hash(&buf[start..end]) != stored {
            return Err(Error::Corrupt {
                offset: start as u64,
                message: format!("checksum mismatch in record `{id}`"),
            });
        }
        Ok(CachedRep {
            id,
            num_layers,
            num_heads,
            head_dim,
            head_vectors,
            cls_vectors,
        })
    }
}

/// Encoder and matching-head invocation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounter {
    pub encoder_calls: u64,
    pub match_evals: u64,
}

impl CallCounter {
    pub fn to_text(&self) -> String {
        format!(
            "encoder_calls={}\nmatch_evals={}\n",
            self.encoder_calls, self.match_evals
        )
    }
}

/// Cached representations bound to one model fingerprint, keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct RepCache {
    pub fingerprint: [u8; 32],
    records: BTreeMap<String, CachedRep>,
}

impl RepCache {
    pub fn new(fingerprint: [u8; 32]) -> Self {
        RepCache {
            fingerprint,
            records: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CachedRep> {
        self.records.get(id)
    }

    pub fn insert(&mut self, rep: CachedRep) {
        self.records.insert(rep.id.clone(), rep);
    }

    /// Records in id order.
    pub fn iter(&self) -> impl Iterator<Item = &CachedRep> {
        self.records.values()
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: hex(expected),
                found: hex(&self.fingerprint),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        put_u16(&mut out, CACHE_VERSION);
        out.extend_from_slice(&self.fingerprint);
        put_u32(&mut out, self.records.len() as u32);
        for rep in self.records.values() {
            rep.write(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.bytes(4).ok() != Some(&CACHE_MAGIC[..]) {
            return Err(Error::Format("not a cache file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported cache version {version}, expected {CACHE_VERSION}"
            )));
        }
        let fingerprint: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let count = r.u32()?;
        let mut cache = RepCache::new(fingerprint);
        for _ in 0..count {
            let offset = r.offset();
            let rep = CachedRep::read(&mut r, bytes)?;
            if cache.records.contains_key(&rep.id) {
                return Err(Error::Corrupt {
                    offset: offset as u64,
                    message: format!("duplicate record `{}`", rep.id),
                });
            }
            cache.insert(rep);
        }
        if !r.is_empty() {
            return Err(Error::Corrupt {
                offset: r.offset() as u64,
                message: "trailing bytes".into(),
            });
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Encodes every sequence not already in `cache`, once each.
///
/// Fails if two inputs share an id or if the cache was built by a different model.
pub fn encode_corpus<T: Real>(
    model: &Model<T>,
    seqs: &[(String, Vec<u32>)],
    cache: &mut RepCache,
    counter: &mut CallCounter,
) -> Result<()> {
    cache.check_fingerprint(&model.fingerprint())?;
    let mut ids = HashSet::new();
    for (id, _) in seqs {
        if !ids.insert(id.as_str()) {
            return Err(Error::Input(format!("duplicate sequence id `{id}`")));
        }
    }
    for (id, tokens) in seqs {
        if cache.get(id).is_some() {
            continue;
        }
        let before = model.encoder_calls();
        let out = model.encode(tokens)?;
        counter.encoder_calls += model.encoder_calls() - before;
        cache.insert(CachedRep::from_output(id.clone(), &out));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPair {
    pub id_a: String,
    pub id_b: String,
    /// Probability of the positive class.
    pub score: f64,
}

/// Best-first: score descending, then `(id_a, id_b)` ascending.
pub fn rank_order(x: &RankedPair, y: &RankedPair) -> Ordering {
    y.score
        .total_cmp(&x.score)
        .then_with(|| (&x.id_a, &x.id_b).cmp(&(&y.id_a, &y.id_b)))
}

/// Scores every unordered pair of cached sequences with the matching head alone.
pub fn score_all_pairs<T: Real>(
    model: &Model<T>,
    cache: &RepCache,
    counter: &mut CallCounter,
) -> Result<Vec<RankedPair>> {
    cache.check_fingerprint(&model.fingerprint())?;
    let before = model.encoder_calls();
    let reps: Vec<(&str, EncoderOutput<T>)> = cache
        .iter()
        .map(|r| (r.id.as_str(), r.to_output()))
        .collect();
    let positive = model.config.labels.positive;
    let mut ranked = Vec::with_capacity(reps.len() * reps.len().saturating_sub(1) / 2);
    for (i, (id_a, a)) in reps.iter().enumerate() {
        for (id_b, b) in &reps[i + 1..] {
            let probs = model.score_outputs(a, b)?;
            counter.match_evals += 1;
            ranked.push(RankedPair {
                id_a: id_a.to_string(),
                id_b: id_b.to_string(),
                score: probs[positive].as_f64(),
            });
        }
    }
    counter.encoder_calls += model.encoder_calls() - before;
    ranked.sort_by(rank_order);
    Ok(ranked)
}

pub fn write_ranked_tsv(path: &Path, ranked: &[RankedPair]) -> Result<()> {
    let mut text = String::from("id_a\tid_b\tscore\n");
    for p in ranked {
        text.push_str(&format!("{}\t{}\t{:.9}\n", p.id_a, p.id_b, p.score));
    }
    std::fs::write(path, text)?;
    Ok(())
}
