//! Word-level tokenization and the transformer text encoder.

mod vocab;

pub use vocab::{words, TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, LayerNorm, SelfAttentionBlock};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// Mean over non-PAD token features.
    Mean,
    /// Feature of the last non-PAD token (EOS for sentences).
    Eos,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pool: Pool,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    /// `V×C`, shared with the caption head.
    pub token_table: ParamId,
    pub positions: ParamId,
    blocks: Vec<SelfAttentionBlock>,
    final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: TextEncoderConfig, rng: &mut impl Rng) -> Self {
        let c = config.dim;
        let std = 1.0 / (c as f64).sqrt();
        let token_table = store.register(format!("{name}.tokens"), normal_tensor(&[config.vocab_size, c], std, rng));
        let positions = store.register(format!("{name}.positions"), normal_tensor(&[config.max_len, c], 0.1 * std, rng));
        let blocks = (0..config.layers)
            .map(|l| SelfAttentionBlock::new(store, &format!("{name}.block{l}"), c, config.heads, config.ffn_dim, rng))
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.ln_final"), c);
        TextEncoder {
            config,
            token_table,
            positions,
            blocks,
            final_norm,
        }
    }

    /// Per-token features `L_T × C`. PAD positions are never attended to;
    /// with `causal`, position `i` only sees positions `≤ i`.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, seq: &TokenSequence, causal: bool) -> Result<Var<'t>> {
        let n = seq.ids.len();
        if seq.len == 0 {
            return Err(Error::Input("text sequence has no tokens".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Input(format!("sequence length {n} exceeds {}", self.config.max_len)));
        }
        if let Some(bad) = seq.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let tokens = tape.param(store, self.token_table).gather_rows(&seq.ids)?;
        let pos_idx: Vec<usize> = (0..n).collect();
        let pos = tape.param(store, self.positions).gather_rows(&pos_idx)?;
        let mut x = tokens.add(pos)?;

        let mut admit = vec![false; n * n];
        for i in 0..n {
            for j in 0..seq.len {
                admit[i * n + j] = !causal || j <= i || i >= seq.len;
            }
        }
        // PAD query rows under causal masking still see every real token
        let admit = if admit.iter().all(|&a| a) { None } else { Some(admit) };
        for block in &self.blocks {
            x = block.forward(tape, store, x, admit.as_deref())?;
        }
        self.final_norm.forward(tape, store, x)
    }

    /// Pooled `1 × C` embedding of per-token features.
    pub fn pool<'t>(&self, features: Var<'t>, seq: &TokenSequence) -> Result<Var<'t>> {
        match self.config.pool {
            Pool::Mean => features.slice_rows(0, seq.len)?.mean_rows(),
            Pool::Eos => features.slice_rows(seq.len - 1, seq.len),
        }
    }

    /// One pooled row per text, each encoded as `[BOS] words [EOS]`.
    pub fn embed_texts<'t, S: AsRef<str>>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        vocab: &Vocabulary,
        texts: &[S],
    ) -> Result<Var<'t>> {
        if texts.is_empty() {
            return Err(Error::Input("no texts to embed".into()));
        }
        let rows = texts
            .iter()
            .map(|t| {
                let seq = TokenSequence::sentence(vocab, t.as_ref(), self.config.max_len)?;
                let feats = self.encode(tape, store, &seq, false)?;
                self.pool(feats, &seq)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    /// `C_emb`: one row per class name, the background entry last.
    pub fn embed_class_names<'t, S: AsRef<str>>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        vocab: &Vocabulary,
        names: &[S],
    ) -> Result<Var<'t>> {
        self.embed_texts(tape, store, vocab, names)
    }

    /// `T_emb`: one row per referring sentence.
    pub fn embed_sentences<'t, S: AsRef<str>>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        vocab: &Vocabulary,
        sentences: &[S],
    ) -> Result<Var<'t>> {
        self.embed_texts(tape, store, vocab, sentences)
    }
}
