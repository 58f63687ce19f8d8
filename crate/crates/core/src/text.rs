//! Closed-vocabulary prompt tokenizer and a small transformer text encoder.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Init, LayerNorm, Linear};

/// Words that carry no content and are skipped by the tokenizer.
pub const FUNCTION_WORDS: &[&str] = &["a", "an", "the", "and", "on", "with", "of", "in", "at"];

/// Content words, in token-id order (id = index + 1; 0 is padding).
pub const CONTENT_WORDS: &[&str] = &[
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "white",
    "circle", "square", "triangle", "background",
    "left", "right", "top", "bottom", "center", "small", "large", "big",
];

pub const PAD_ID: i64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub seq_len: i64,
    pub dim: i64,
    pub layers: usize,
    pub heads: i64,
    pub ff_mult: i64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { seq_len: 8, dim: 64, layers: 2, heads: 4, ff_mult: 2 }
    }
}

pub fn vocab_size() -> i64 {
    CONTENT_WORDS.len() as i64 + 1
}

/// Content-token ids of `prompt`, padded or truncated to `seq_len`.
/// Returns `None` for an empty prompt.
pub fn tokenize(prompt: &str, seq_len: usize) -> Result<Option<Vec<i64>>> {
    let mut ids = Vec::new();
    let mut any = false;
    for raw in prompt.split_whitespace() {
        any = true;
        let word = raw.to_ascii_lowercase();
        let word = word.trim_matches(|c: char| c == ',' || c == '.');
        if FUNCTION_WORDS.contains(&word) {
            continue;
        }
        match CONTENT_WORDS.iter().position(|w| *w == word) {
            Some(i) => ids.push(i as i64 + 1),
            None => return Err(Error::Vocabulary(format!("unknown token {raw:?}"))),
        }
    }
    if !any {
        return Ok(None);
    }
    ids.truncate(seq_len);
    ids.resize(seq_len, PAD_ID);
    Ok(Some(ids))
}

struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor) -> Tensor {
        let x = x + self.attn.forward(&self.norm1.forward(x), None);
        let h = self.ff2.forward(&self.ff1.forward(&self.norm2.forward(&x)).gelu("none"));
        x + h
    }
}

/// Learned token and position embeddings followed by pre-norm
/// self-attention layers. Also owns the null sequence used for
/// unconditional prediction.
pub struct TextEncoder {
    cfg: TextConfig,
    tokens: Tensor,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    null: Tensor,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, prefix: &str, cfg: &TextConfig) -> Result<Self> {
        let d = cfg.dim;
        let p = |s: &str| format!("{prefix}.{s}");
        let tokens = b.var(&p("tokens"), &[vocab_size(), d], Init::Normal(0.5))?;
        let positions = b.var(&p("positions"), &[cfg.seq_len, d], Init::Normal(0.1))?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let l = |s: &str| format!("{prefix}.layers.{i}.{s}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(b, &l("norm1"), d)?,
                    attn: Attention::new(b, &l("attn"), d, d, cfg.heads)?,
                    norm2: LayerNorm::new(b, &l("norm2"), d)?,
                    ff1: Linear::new(b, &l("ff1"), d, d * cfg.ff_mult, true)?,
                    ff2: Linear::new(b, &l("ff2"), d * cfg.ff_mult, d, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            tokens,
            positions,
            layers,
            norm: LayerNorm::new(b, &p("norm"), d)?,
            null: b.var(&p("null"), &[cfg.seq_len, d], Init::Normal(0.5))?,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// (1, L, D) learned unconditional sequence.
    pub fn null_embedding(&self) -> Tensor {
        self.null.unsqueeze(0)
    }

    /// Encodes a batch of token-id rows, (B, L) -> (B, L, D).
    pub fn encode_ids(&self, ids: &Tensor) -> Tensor {
        let mut x = self.tokens.index_select(0, &ids.view([-1]))
            .view([ids.size()[0], self.cfg.seq_len, self.cfg.dim])
            + self.positions.unsqueeze(0);
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        self.norm.forward(&x)
    }

    /// (1, L, D) embedding of one prompt; the empty prompt maps to the null sequence.
    pub fn embed(&self, prompt: &str) -> Result<Tensor> {
        self.embed_batch(&[prompt])
    }

    /// (B, L, D) embeddings; empty prompts use the null sequence.
    pub fn embed_batch(&self, prompts: &[&str]) -> Result<Tensor> {
        let tokenized = prompts
            .iter()
            .map(|p| tokenize(p, self.cfg.seq_len as usize))
            .collect::<Result<Vec<_>>>()?;
        self.embed_tokens(&tokenized)
    }

    /// Embeds pre-tokenized rows; `None` rows use the null sequence.
    pub fn embed_tokens(&self, rows: &[Option<Vec<i64>>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(crate::error::shape_err("empty prompt batch"));
        }
        let present: Vec<i64> = rows.iter().flatten().flatten().copied().collect();
        let encoded = if present.is_empty() {
            None
        } else {
            let n = present.len() as i64 / self.cfg.seq_len;
            Some(self.encode_ids(&Tensor::from_slice(&present).view([n, self.cfg.seq_len])))
        };
        let mut next = 0;
        let parts: Vec<Tensor> = rows
            .iter()
            .map(|row| match row {
                Some(_) => {
                    let t = encoded.as_ref().expect("encoded rows exist").narrow(0, next, 1);
                    next += 1;
                    t
                }
                None => self.null_embedding(),
            })
            .collect();
        Ok(Tensor::cat(&parts, 0).to_kind(Kind::Float))
    }
}

/// One-shot helper: embedding of `prompt` under `encoder`.
pub fn embed_text(prompt: &str, encoder: &TextEncoder) -> Result<Tensor> {
    encoder.embed(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> TextEncoder {
        let mut b = Builder::random(11, Kind::Float);
        TextEncoder::new(&mut b, "text", &TextConfig::default()).unwrap()
    }

    #[test]
    fn vocabulary_is_about_thirty_words() {
        let n = FUNCTION_WORDS.len() + CONTENT_WORDS.len();
        assert!((25..=35).contains(&n), "{n}");
    }

    #[test]
    fn tokenize_drops_function_words_and_pads() {
        let ids = tokenize("a red circle on a blue background", 8).unwrap().unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(&ids[..4], &[1, 9, 3, 12]);
        assert!(ids[4..].iter().all(|&i| i == PAD_ID));
        assert_eq!(tokenize("   ", 8).unwrap(), None);
    }

    #[test]
    fn unknown_word_names_the_token() {
        match tokenize("a xyzzy", 8) {
            Err(Error::Vocabulary(msg)) => assert!(msg.contains("xyzzy")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_prompt_is_null_sequence() {
        let enc = encoder();
        let e = enc.embed("").unwrap();
        assert_eq!(e.size(), vec![1, 8, 64]);
        assert!(e.equal(&enc.null_embedding()));
    }

    #[test]
    fn mixed_batch_keeps_order() {
        let enc = encoder();
        let batch = enc.embed_batch(&["a red circle", "", "a blue square"]).unwrap();
        let close = |a: &Tensor, b: &Tensor| a.allclose(b, 1e-6, 1e-6, false);
        assert!(close(&batch.get(0), &enc.embed("a red circle").unwrap().get(0)));
        assert!(batch.get(1).equal(&enc.null_embedding().get(0)));
        assert!(close(&batch.get(2), &enc.embed("a blue square").unwrap().get(0)));
        assert!(!batch.get(0).equal(&batch.get(2)));
    }
}
