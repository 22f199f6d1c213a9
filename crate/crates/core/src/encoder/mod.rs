//! Tokenization with entity markers, the transformer encoder, and the three
//! pooled views: `u` (marker states, width 2d), `w` (context `[CLS]`), and
//! `v` (relation-encoder `[CLS]`).

mod sequence;
mod transformer;
mod vocab;

pub use sequence::{build_token_sequence, label_ids, TokenSequence};
pub use transformer::{EncoderConfig, TransformerEncoder};
pub use vocab::{Vocabulary, BLANK, CLS, HEAD, MASK, NUM_RESERVED, PAD, RESERVED, SEP, TAIL, UNK};

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Var};

/// Pooled context-encoder outputs for one sentence.
#[derive(Debug, Clone, Copy)]
pub struct ContextOutput {
    /// `[1, 2d]`: hidden states at `[head]` and `[tail]`, concatenated.
    pub u: Var,
    /// `[1, d]`: hidden state at `[CLS]`.
    pub w: Var,
    /// `[len, d]`: all hidden states (used by the MLM head).
    pub hidden: Var,
}

pub fn forward_context(
    encoder: &TransformerEncoder,
    tape: &mut Tape,
    store: &ParamStore,
    seq: &TokenSequence,
    dropout: Option<&mut crate::Rng>,
) -> Result<ContextOutput> {
    seq.validate()?;
    let hidden = encoder.forward(tape, store, &seq.ids, dropout)?;
    let h = tape.gather_rows(hidden, &[seq.head_marker])?;
    let t = tape.gather_rows(hidden, &[seq.tail_marker])?;
    let u = tape.concat(&[h, t])?;
    let w = tape.gather_rows(hidden, &[0])?;
    Ok(ContextOutput { u, w, hidden })
}

/// `[1, d]` relation embedding: the `[CLS]` state over `[CLS] label [SEP]`.
pub fn forward_relation(
    encoder: &TransformerEncoder,
    tape: &mut Tape,
    store: &ParamStore,
    label: &[usize],
) -> Result<Var> {
    if label.is_empty() {
        return Err(crate::Error::Sequence("relation label is empty".into()));
    }
    let mut ids = Vec::with_capacity(label.len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(label);
    ids.push(SEP);
    let hidden = encoder.forward(tape, store, &ids, None)?;
    tape.gather_rows(hidden, &[0])
}
