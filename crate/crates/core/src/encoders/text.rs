use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Token-embedding width `D_t`.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    /// Output width `D_e`.
    pub embed_out: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            width: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            max_len: 77,
            embed_out: 64,
            seed: 0x7e47,
        }
    }
}

/// One position of a text-encoder input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextSlot {
    /// Vocabulary id, looked up in the frozen token table.
    Token(u32),
    /// Row index into a caller-supplied matrix of raw vectors (learnable prompt slots).
    Vector(usize),
}

/// Frozen text encoder: token table, positional embedding, pre-norm
/// transformer, final norm and a bias-free projection to `D_e`. The output is
/// read at the last sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder<T: Scalar> {
    cfg: TextEncoderConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::config(format!(
                "text width {} is not divisible by heads {}",
                cfg.width, cfg.heads
            )));
        }
        if cfg.vocab_size == 0 || cfg.max_len == 0 {
            return Err(Error::config("text vocab_size and max_len must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        s.insert("text.token_embedding", normal_tensor(&mut rng, &[cfg.vocab_size, cfg.width], 1.0));
        s.insert("text.pos_embed", normal_tensor(&mut rng, &[cfg.max_len, cfg.width], 0.01));
        for l in 0..cfg.depth {
            nn::init_block(&mut s, &mut rng, &format!("text.blocks.{l}"), cfg.width, cfg.width * cfg.mlp_ratio, None);
        }
        nn::init_layer_norm(&mut s, "text.norm", cfg.width);
        nn::init_linear(&mut s, &mut rng, "text.proj", cfg.width, cfg.embed_out, false, None);
        Ok(Self { cfg, params: s })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Records the encoder's parameters on `tape` as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind(tape, |_| false)
    }

    /// Token-embedding rows for `ids`, shape `[ids.len(), D_t]`.
    pub fn token_embeddings(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let table = self.params.require("text.token_embedding")?;
        let w = self.cfg.width;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            let id = id as usize;
            if id >= self.cfg.vocab_size {
                return Err(Error::config(format!("token id {id} outside vocabulary {}", self.cfg.vocab_size)));
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(Tensor::new([ids.len(), w], data)?)
    }

    /// Encodes already-embedded sequences `[c, L, D_t]` into `[c, D_e]`.
    pub fn encode_embedded<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.width {
            return Err(Error::config(format!(
                "text input {shape:?} does not match [c, L, {}]",
                self.cfg.width
            )));
        }
        let (c, len) = (shape[0], shape[1]);
        if len == 0 || len > self.cfg.max_len {
            return Err(Error::config(format!(
                "sequence length {len} exceeds the encoder maximum {}",
                self.cfg.max_len
            )));
        }
        let pos = p.get("text.pos_embed")?.narrow(0, 0, len)?;
        let mut z = x.add(pos)?;
        for l in 0..self.cfg.depth {
            z = nn::block(p, &format!("text.blocks.{l}"), z, self.cfg.heads)?;
        }
        let z = nn::layer_norm(p, "text.norm", z)?;
        let last = z.narrow(1, len - 1, 1)?.reshape([c, self.cfg.width])?;
        nn::linear(p, "text.proj", last)
    }

    /// Encodes rows of token ids and raw vector slots.
    ///
    /// Every row must have the same length. `vectors` is `[V, D_t]` and is
    /// required whenever a row holds a [`TextSlot::Vector`].
    pub fn encode_rows<'t>(
        &self,
        p: &Bound<'t, T>,
        rows: &[Vec<TextSlot>],
        vectors: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != len) {
            return Err(Error::config("text rows must be non-empty and of equal length"));
        }
        if len > self.cfg.max_len {
            return Err(Error::config(format!(
                "sequence length {len} exceeds the encoder maximum {}",
                self.cfg.max_len
            )));
        }
        let tape = p.get("text.token_embedding")?.tape();
        let table = p.get("text.token_embedding")?;
        let mut pieces = Vec::with_capacity(rows.len() * len);
        for slot in rows.iter().flatten() {
            let piece = match *slot {
                TextSlot::Token(id) => table.index_select(&[id as usize])?,
                TextSlot::Vector(i) => vectors
                    .ok_or_else(|| Error::contract("vector slot without a vector matrix"))?
                    .index_select(&[i])?,
            };
            pieces.push(piece);
        }
        let x = tape.concat(&pieces, 0)?.reshape([rows.len(), len, self.cfg.width])?;
        self.encode_embedded(p, x)
    }

    /// Encodes token-id rows without gradients.
    pub fn encode_tokens(&self, rows: &[Vec<u32>]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape);
        let len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|r| r.len() != len) {
            return Err(Error::config("text rows must be non-empty and of equal length"));
        }
        let flat: Vec<usize> = rows.iter().flatten().map(|&i| i as usize).collect();
        if let Some(bad) = flat.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::config(format!("token id {bad} outside vocabulary {}", self.cfg.vocab_size)));
        }
        let x = p
            .get("text.token_embedding")?
            .index_select(&flat)?
            .reshape([rows.len(), len, self.cfg.width])?;
        Ok(self.encode_embedded(&p, x)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};

    #[test]
    fn shape_and_determinism() {
        let enc = TextEncoder::<f64>::new(TextEncoderConfig::default()).unwrap();
        let rows: Vec<Vec<u32>> = (0..20).map(|i| vec![0, 1, 2, 3, 10 + i]).collect();
        let a = enc.encode_tokens(&rows).unwrap();
        assert_eq!(a.shape(), &[20, 64]);
        let b = enc.encode_tokens(&rows).unwrap();
        assert!(a.bit_eq(&b));
        let same = enc.encode_tokens(&[vec![0, 1, 2, 3, 9], vec![0, 1, 2, 3, 9]]).unwrap();
        assert_eq!(same.row(0), same.row(1));
    }

    #[test]
    fn rejects_long_sequences() {
        let cfg = TextEncoderConfig {
            max_len: 4,
            ..Default::default()
        };
        let enc = TextEncoder::<f64>::new(cfg).unwrap();
        assert!(enc.encode_tokens(&[vec![0, 1, 2, 3, 4]]).is_err());
    }

    #[test]
    fn vector_slots_equal_token_lookup() {
        let enc = TextEncoder::<f64>::new(TextEncoderConfig::default()).unwrap();
        let tape = Tape::new();
        let p = enc.bind(&tape);
        let vecs = tape.constant(&enc.token_embeddings(&[0, 1]).unwrap());
        let mixed = enc
            .encode_rows(&p, &[vec![TextSlot::Vector(0), TextSlot::Vector(1), TextSlot::Token(7)]], Some(vecs))
            .unwrap()
            .value();
        let ids = enc.encode_tokens(&[vec![0, 1, 7]]).unwrap();
        assert!(mixed.bit_eq(&ids));
    }

    #[test]
    fn prompt_slot_gradient_matches_finite_differences() {
        let cfg = TextEncoderConfig {
            width: 16,
            heads: 2,
            embed_out: 8,
            ..Default::default()
        };
        let enc = TextEncoder::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Tensor<f64> = normal_tensor(&mut rng, &[2, 16], 0.5);
        let weights: Tensor<f64> = normal_tensor(&mut rng, &[3, 8], 1.0);
        let rows: Vec<Vec<TextSlot>> = (0..3)
            .map(|i| vec![TextSlot::Vector(0), TextSlot::Vector(1), TextSlot::Token(20 + i)])
            .collect();
        let report = check_gradients(
            &[v],
            |tape, x| {
                let p = enc.bind(tape);
                let out = enc.encode_rows(&p, &rows, Some(x[0]))?;
                Ok(out.mul(tape.constant(&weights))?.sum_all())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
