use rand::Rng as _;

use crate::encoder::{TokenSequence, Vocabulary, MASK, NUM_RESERVED};
use crate::error::{Error, Result};

/// Positions selected for masked-token prediction and their original ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MlmTargets {
    pub positions: Vec<usize>,
    pub original_ids: Vec<usize>,
}

impl MlmTargets {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

/// BERT-style corruption: each non-special token is selected with
/// probability `mask_rate`; selected tokens become `[MASK]` 80% of the time,
/// a random non-special token 10%, and stay unchanged 10%.
pub fn apply_mlm_mask(
    seq: &TokenSequence,
    vocab_size: usize,
    mask_rate: f64,
    rng: &mut crate::Rng,
) -> Result<(TokenSequence, MlmTargets)> {
    if !(0.0..1.0).contains(&mask_rate) {
        return Err(Error::invalid(format!("mask_rate must lie in [0, 1), got {mask_rate}")));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::invalid("vocabulary has no ordinary tokens"));
    }
    let mut out = seq.clone();
    let mut targets = MlmTargets::default();
    for (pos, id) in out.ids.iter_mut().enumerate() {
        if Vocabulary::is_special(*id) || !rng.random_bool(mask_rate) {
            continue;
        }
        targets.positions.push(pos);
        targets.original_ids.push(*id);
        let roll: f64 = rng.random();
        if roll < 0.8 {
            *id = MASK;
        } else if roll < 0.9 {
            *id = rng.random_range(NUM_RESERVED..vocab_size);
        }
    }
    Ok((out, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{CLS, HEAD, SEP, TAIL};

    fn seq() -> TokenSequence {
        TokenSequence::from_parts(vec![CLS, HEAD, 10, 11, 12, TAIL, 13, 14, SEP], (2, 2), (6, 6), 1, 5).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = crate::seeded_rng(1);
        let (s, t) = apply_mlm_mask(&seq(), 20, 0.0, &mut rng).unwrap();
        assert_eq!(s, seq());
        assert!(t.is_empty());
    }

    #[test]
    fn invalid_rate_is_error() {
        let mut rng = crate::seeded_rng(1);
        assert!(apply_mlm_mask(&seq(), 20, 1.0, &mut rng).is_err());
        assert!(apply_mlm_mask(&seq(), 20, -0.1, &mut rng).is_err());
    }

    #[test]
    fn specials_never_selected_and_replacement_mix() {
        let mut rng = crate::seeded_rng(42);
        let base = seq();
        let (mut masked, mut random, mut kept, mut total) = (0, 0, 0, 0);
        for _ in 0..1000 {
            let (s, t) = apply_mlm_mask(&base, 20, 0.5, &mut rng).unwrap();
            for (&p, &orig) in t.positions.iter().zip(&t.original_ids) {
                assert!(!Vocabulary::is_special(base.ids[p]));
                assert_eq!(orig, base.ids[p]);
                total += 1;
                match s.ids[p] {
                    MASK => masked += 1,
                    x if x == orig => kept += 1,
                    _ => random += 1,
                }
            }
            for p in [0, 1, 5, 8] {
                assert_eq!(s.ids[p], base.ids[p]);
            }
        }
        let frac = |x: usize| x as f64 / total as f64;
        assert!((frac(masked) - 0.8).abs() < 0.03);
        // random replacement can coincide with the original token
        assert!((frac(random + kept) - 0.2).abs() < 0.03);
        assert!(frac(kept) > 0.07);
    }
}
