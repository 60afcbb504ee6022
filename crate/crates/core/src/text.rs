//! Word-level tokenizer and the frozen transformer text encoder.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::MAX_TOKENS;
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];
const MASKED_LOGIT: f64 = -1e9;

/// Lowercased alphanumeric runs; everything else separates words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved ids first, then words by descending frequency with ties
    /// broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w)).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token → id map for serialisation.
    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Vocab> {
        let mut tokens = vec![String::new(); map.len()];
        for (t, &id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Checkpoint(format!("vocabulary id {id} out of range")))?;
            *slot = t.clone();
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(Error::Checkpoint(format!("vocabulary id {i} must be {r}")));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, u32>::deserialize(d)?;
        Vocab::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// Fixed-length token ids with validity flags; position 0 is `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
}

impl TokenSequence {
    pub fn valid_len(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut ids = Vec::with_capacity(MAX_TOKENS);
    ids.push(CLS_ID);
    let mut dropped = 0usize;
    for w in words(text) {
        if ids.len() < MAX_TOKENS {
            ids.push(vocab.id(&w).unwrap_or(UNK_ID));
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("prompt truncated to {} tokens ({dropped} words dropped)", MAX_TOKENS);
    }
    let n = ids.len();
    ids.resize(MAX_TOKENS, PAD_ID);
    let valid = (0..MAX_TOKENS).map(|i| i < n).collect();
    TokenSequence { ids, valid }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextPooling {
    /// Output at the `[CLS]` position.
    Cls,
    /// Mean over valid non-`[CLS]` positions.
    MeanWords,
}

/// Frozen pre-norm transformer over word embeddings.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub dim: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    /// Registers parameters under `b`'s prefix. Callers pass a frozen builder.
    pub fn new(b: &mut Builder, vocab_size: usize, dim: usize, layers: usize, heads: usize) -> Self {
        let emb = b.init.normal(vocab_size, dim, 1.0);
        let token_embedding = b.add("token_embedding", emb);
        let pos = b.init.normal(MAX_TOKENS, dim, 0.1);
        let position = b.add("position", pos);
        let blocks = (0..layers).map(|i| TransformerBlock::new(b, &format!("blocks.{i}"), dim, heads)).collect();
        let final_norm = LayerNorm::new(b, "final_norm", dim);
        TextEncoder { token_embedding, position, blocks, final_norm, dim, vocab_size }
    }

    /// Encoder output for every position, `len × D`.
    pub fn hidden_states(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSequence) -> Result<Var> {
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { id, size: self.vocab_size });
        }
        let len = tokens.ids.len();
        if len == 0 || len > MAX_TOKENS || tokens.valid.len() != len || !tokens.valid[0] {
            return Err(Error::Shape(format!("token sequence of length {len} with [CLS] validity {:?}", tokens.valid.first())));
        }
        let emb = g.param(store, self.token_embedding);
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let x = g.gather_rows(emb, Rc::new(ids));
        let pos = g.param(store, self.position);
        let pos = g.slice_rows(pos, 0, len);
        let mut x = g.add(x, pos);
        let bias: Vec<f64> = tokens.valid.iter().map(|&v| if v { 0.0 } else { MASKED_LOGIT }).collect();
        let bias = g.constant(Tensor::row_vector(bias));
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(bias));
        }
        Ok(self.final_norm.forward(g, store, x))
    }

    /// The global text feature `1 × D`.
    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence, pooling: TextPooling) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.hidden_states(&mut g, store, tokens)?;
        let out = match pooling {
            TextPooling::Cls => g.value(h).row(0).to_vec(),
            TextPooling::MeanWords => {
                let hv = g.value(h);
                let rows: Vec<usize> = (1..tokens.ids.len()).filter(|&i| tokens.valid[i]).collect();
                if rows.is_empty() {
                    hv.row(0).to_vec()
                } else {
                    let mut acc = vec![0.0; self.dim];
                    for &r in &rows {
                        for (a, v) in acc.iter_mut().zip(hv.row(r)) {
                            *a += v;
                        }
                    }
                    acc.iter().map(|a| a / rows.len() as f64).collect()
                }
            }
        };
        let t = Tensor::row_vector(out);
        if !t.is_finite() {
            return Err(Error::NonFinite("text feature".into()));
        }
        Ok(t)
    }
}
