use super::vocab::{Vocabulary, BLANK, CLS, HEAD, SEP, TAIL};
use crate::corpus::{Instance, Span};
use crate::error::{Error, Result};

/// Encoder input: `[CLS] … [SEP]` with a `[head]` marker right before the
/// head mention and a `[tail]` marker right before the tail mention.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Inclusive entity spans within `ids` (after marker insertion).
    pub head: Span,
    pub tail: Span,
    pub head_marker: usize,
    pub tail_marker: usize,
}

impl TokenSequence {
    pub fn from_parts(
        ids: Vec<usize>,
        head: (usize, usize),
        tail: (usize, usize),
        head_marker: usize,
        tail_marker: usize,
    ) -> Result<Self> {
        let s = Self { ids, head: Span(head.0, head.1), tail: Span(tail.0, tail.1), head_marker, tail_marker };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if n < 2 || self.ids[0] != CLS || self.ids[n - 1] != SEP {
            return Err(Error::Sequence("sequence must start with [CLS] and end with [SEP]".into()));
        }
        let last = n - 1;
        for (name, s) in [("head", self.head), ("tail", self.tail)] {
            if !(0 < s.0 && s.0 <= s.1 && s.1 < last) {
                return Err(Error::Sequence(format!("{name} span [{}, {}] invalid for length {n}", s.0, s.1)));
            }
        }
        if self.head.overlaps(self.tail) {
            return Err(Error::Sequence("head and tail spans overlap".into()));
        }
        if self.ids.get(self.head_marker) != Some(&HEAD) {
            return Err(Error::Sequence(format!("no [head] marker at position {}", self.head_marker)));
        }
        if self.ids.get(self.tail_marker) != Some(&TAIL) {
            return Err(Error::Sequence(format!("no [tail] marker at position {}", self.tail_marker)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Piece {
    Filler,
    Head,
    Tail,
    HeadMarker,
    TailMarker,
}

/// Inserts entity markers, optionally blanks mentions, wraps with
/// `[CLS]`/`[SEP]`, and trims trailing filler tokens to fit `max_len`.
pub fn build_token_sequence(
    instance: &Instance,
    vocab: &Vocabulary,
    blank_head: bool,
    blank_tail: bool,
    max_len: usize,
) -> Result<TokenSequence> {
    instance.validate().map_err(Error::Sequence)?;
    let mut pieces: Vec<(Piece, usize)> = Vec::with_capacity(instance.tokens.len() + 2);
    for (i, tok) in instance.tokens.iter().enumerate() {
        let (span, kind, marker, marker_id, blank) = if instance.head.contains(i) {
            (instance.head, Piece::Head, Piece::HeadMarker, HEAD, blank_head)
        } else if instance.tail.contains(i) {
            (instance.tail, Piece::Tail, Piece::TailMarker, TAIL, blank_tail)
        } else {
            pieces.push((Piece::Filler, vocab.id(tok)));
            continue;
        };
        if i == span.0 {
            pieces.push((marker, marker_id));
            pieces.push((kind, if blank { BLANK } else { vocab.id(tok) }));
        } else if !blank {
            pieces.push((kind, vocab.id(tok)));
        }
    }

    let budget = max_len.saturating_sub(2);
    while pieces.len() > budget {
        match pieces.iter().rposition(|p| p.0 == Piece::Filler) {
            Some(i) => {
                pieces.remove(i);
            }
            None => {
                return Err(Error::Sequence(format!(
                    "entity mentions and markers need {} tokens but max length is {max_len}",
                    pieces.len() + 2
                )))
            }
        }
    }

    let mut ids = Vec::with_capacity(pieces.len() + 2);
    ids.push(CLS);
    let (mut head, mut tail) = (None::<Span>, None::<Span>);
    let (mut hm, mut tm) = (0, 0);
    for (kind, id) in pieces {
        let pos = ids.len();
        ids.push(id);
        match kind {
            Piece::HeadMarker => hm = pos,
            Piece::TailMarker => tm = pos,
            Piece::Head => head = Some(head.map_or(Span(pos, pos), |s| Span(s.0, pos))),
            Piece::Tail => tail = Some(tail.map_or(Span(pos, pos), |s| Span(s.0, pos))),
            Piece::Filler => {}
        }
    }
    ids.push(SEP);
    let seq = TokenSequence {
        ids,
        head: head.expect("head span is non-empty"),
        tail: tail.expect("tail span is non-empty"),
        head_marker: hm,
        tail_marker: tm,
    };
    seq.validate()?;
    Ok(seq)
}

/// Token ids of a relation label (the relation encoder adds `[CLS]`/`[SEP]`).
pub fn label_ids<S: AsRef<str>>(label: &[S], vocab: &Vocabulary) -> Result<Vec<usize>> {
    if label.is_empty() {
        return Err(Error::Sequence("relation label is empty".into()));
    }
    Ok(vocab.encode(label))
}
