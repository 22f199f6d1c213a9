//! Pretraining losses: contrastive context representation (CCR), contrastive
//! relation representation (CRR), masked language modeling (MLM), and their
//! unweighted sum.

use serde::{Deserialize, Serialize};

use crate::corpus::MlmTargets;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive logit for excluded candidates; its softmax weight underflows to 0.
const EXCLUDED: f64 = -1e30;

/// NT-Xent over sentence pairs. Anchor `u_a[i]` scores against every
/// `u_b[j]` and every `u_a[j]` with `j != i`; its positive is `u_b[i]`.
/// The B side is anchored symmetrically and the loss is the mean over all
/// `2N` anchors.
pub fn ccr_loss(tape: &mut Tape, u_a: &[Var], u_b: &[Var], temperature: f64) -> Result<Var> {
    let n = u_a.len();
    if n < 2 {
        return Err(Error::invalid(format!("contrastive context loss needs N >= 2 pairs, got {n}")));
    }
    if u_b.len() != n {
        return Err(Error::shape(format!("{n} A-side vectors but {} B-side vectors", u_b.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let all: Vec<Var> = u_a.iter().chain(u_b).copied().collect();
    let width = tape.shape(all[0]).last().copied().unwrap_or(0);
    if all.iter().any(|&v| tape.shape(v).last().copied() != Some(width)) {
        return Err(Error::shape("contrastive context vectors differ in width"));
    }
    let u = tape.stack_rows(&all)?;
    let ut = tape.transpose(u)?;
    let sim = tape.matmul(u, ut)?;
    let sim = tape.scale(sim, 1.0 / temperature)?;
    let m = 2 * n;
    let mut mask = vec![0.0; m * m];
    for i in 0..m {
        mask[i * m + i] = EXCLUDED;
    }
    let mask = tape.constant(Tensor::matrix(m, m, mask)?);
    let logits = tape.add(sim, mask)?;
    let targets: Vec<usize> = (0..m).map(|i| if i < n { i + n } else { i - n }).collect();
    tape.cross_entropy(logits, &targets)
}

/// Contrastive loss between each sentence's label-aware vector `w[i]` and the
/// relation vectors `v`, where `relation_of[i]` indexes the true relation.
/// Mean over sentences.
pub fn crr_loss(tape: &mut Tape, w: &[Var], v: &[Var], relation_of: &[usize], temperature: f64) -> Result<Var> {
    if w.is_empty() || v.is_empty() {
        return Err(Error::invalid("contrastive relation loss needs sentences and relations"));
    }
    if relation_of.len() != w.len() {
        return Err(Error::shape(format!("{} sentences but {} relation indices", w.len(), relation_of.len())));
    }
    if let Some(&bad) = relation_of.iter().find(|&&r| r >= v.len()) {
        return Err(Error::invalid(format!("relation index {bad} out of range for {} relations", v.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let wm = tape.stack_rows(w)?;
    let vm = tape.stack_rows(v)?;
    let vt = tape.transpose(vm)?;
    let logits = tape.matmul(wm, vt)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    tape.cross_entropy(logits, relation_of)
}

/// Masked-token cross-entropy through an output layer `decoder` `[d, V]`
/// with bias `[V]`. Empty targets give a constant zero.
pub fn mlm_loss(tape: &mut Tape, hidden: Var, targets: &MlmTargets, decoder: Var, bias: Var) -> Result<Var> {
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let len = tape.shape(hidden)[0];
    if let Some(&p) = targets.positions.iter().find(|&&p| p >= len) {
        return Err(Error::invalid(format!("MLM target position {p} out of range for {len} tokens")));
    }
    let states = tape.gather_rows(hidden, &targets.positions)?;
    let logits = tape.matmul(states, decoder)?;
    let logits = tape.add(logits, bias)?;
    tape.cross_entropy(logits, &targets.original_ids)
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ccr: f64,
    pub l_crr: f64,
    pub l_mlm: f64,
    pub total: f64,
}

/// Equal-weight sum `l_ccr + l_crr + l_mlm`, summed in that order.
pub fn total_loss(l_ccr: f64, l_crr: f64, l_mlm: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_ccr", l_ccr), ("l_crr", l_crr), ("l_mlm", l_mlm)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossBreakdown { l_ccr, l_crr, l_mlm, total: l_ccr + l_crr + l_mlm })
}

/// Tape-level counterpart of [`total_loss`], in the same summation order.
pub fn total_loss_var(tape: &mut Tape, l_ccr: Var, l_crr: Var, l_mlm: Var) -> Result<(Var, LossBreakdown)> {
    let parts = total_loss(tape.scalar(l_ccr), tape.scalar(l_crr), tape.scalar(l_mlm))?;
    let s = tape.add(l_ccr, l_crr)?;
    let s = tape.add(s, l_mlm)?;
    Ok((s, parts))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    use super::*;
    use crate::tensor::finite_difference_check;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Plain-loop NT-Xent: no tensors, no stabilization tricks beyond max-shift.
    fn ccr_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let n = a.len();
        let mut total = 0.0;
        for side in 0..2 {
            let (anchors, others) = if side == 0 { (a, b) } else { (b, a) };
            for i in 0..n {
                let mut scores = Vec::new();
                for j in 0..n {
                    scores.push(dot(&anchors[i], &others[j]) / tau);
                }
                for j in 0..n {
                    if j != i {
                        scores.push(dot(&anchors[i], &anchors[j]) / tau);
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                total -= (scores[i] - max) - denom.ln();
            }
        }
        total / (2 * n) as f64
    }

    fn crr_oracle(w: &[Vec<f64>], v: &[Vec<f64>], rel: &[usize], tau: f64) -> f64 {
        let mut total = 0.0;
        for (i, wi) in w.iter().enumerate() {
            let scores: Vec<f64> = v.iter().map(|vj| dot(wi, vj) / tau).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            total -= (scores[rel[i]] - max) - denom.ln();
        }
        total / w.len() as f64
    }

    fn vars(tape: &mut Tape, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter().map(|r| tape.leaf(Tensor::vector(r.clone()).requires_grad(true))).collect()
    }

    fn ccr_value(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let (va, vb) = (vars(&mut tape, a), vars(&mut tape, b));
        let l = ccr_loss(&mut tape, &va, &vb, tau).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn ccr_orthonormal_pairs() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = ccr_value(&e, &e, 1.0);
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.5514, epsilon = 5e-5);
    }

    #[test]
    fn ccr_identical_vectors_is_log3() {
        let x = vec![vec![0.3, -0.2, 0.5]; 2];
        assert_abs_diff_eq!(ccr_value(&x, &x, 1.0), 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ccr_needs_two_pairs() {
        let mut tape = Tape::new();
        let a = vars(&mut tape, &[vec![1.0]]);
        assert!(ccr_loss(&mut tape, &a, &a, 1.0).is_err());
    }

    #[test]
    fn ccr_decreases_with_positive_similarity() {
        let mut prev = f64::INFINITY;
        for c in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let a = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
            let mut b = a.clone();
            b[0] = vec![c, 0.0, 0.0];
            let l = ccr_value(&a, &b, 1.0);
            assert!(l < prev, "loss {l} did not drop below {prev} at c={c}");
            prev = l;
        }
    }

    #[test]
    fn ccr_matches_oracle_and_is_permutation_invariant() {
        let mut rng = crate::seeded_rng(11);
        for n in 2..=8 {
            let a: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
            let l = ccr_value(&a, &b, 0.7);
            assert_abs_diff_eq!(l, ccr_oracle(&a, &b, 0.7), epsilon = 1e-10);
            assert!(l >= 0.0);
            let (mut pa, mut pb) = (a.clone(), b.clone());
            pa.rotate_left(1);
            pb.rotate_left(1);
            assert_abs_diff_eq!(ccr_value(&pa, &pb, 0.7), l, epsilon = 1e-12);
        }
    }

    fn crr_value(w: &[Vec<f64>], v: &[Vec<f64>], rel: &[usize], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let (vw, vv) = (vars(&mut tape, w), vars(&mut tape, v));
        let l = crr_loss(&mut tape, &vw, &vv, rel, tau).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn crr_single_relation_is_zero() {
        assert_eq!(crr_value(&[vec![1.0, 2.0], vec![3.0, 4.0]], &[vec![0.5, 0.5]], &[0, 0], 1.0), 0.0);
    }

    #[test]
    fn crr_hand_value() {
        let l = crr_value(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0], 1.0);
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.3133, epsilon = 5e-5);
    }

    #[test]
    fn crr_relabeling_symmetry_and_oracle() {
        let mut rng = crate::seeded_rng(5);
        for n in 2..=8 {
            let w: Vec<Vec<f64>> = (0..2 * n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let v: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let rel: Vec<usize> = (0..2 * n).map(|i| i / 2).collect();
            let l = crr_value(&w, &v, &rel, 1.0);
            assert_abs_diff_eq!(l, crr_oracle(&w, &v, &rel, 1.0), epsilon = 1e-10);
            // reverse relation order and remap indices
            let vr: Vec<Vec<f64>> = v.iter().rev().cloned().collect();
            let relr: Vec<usize> = rel.iter().map(|r| n - 1 - r).collect();
            assert_abs_diff_eq!(crr_value(&w, &vr, &relr, 1.0), l, epsilon = 1e-12);
        }
    }

    #[test]
    fn crr_decreases_with_true_similarity() {
        let v = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let mut prev = f64::INFINITY;
        for c in [0.0, 0.5, 1.0, 2.0] {
            let w = vec![vec![c, 0.0, 0.3]];
            let l = crr_value(&w, &v, &[0], 1.0);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn crr_index_out_of_range() {
        let mut tape = Tape::new();
        let w = vars(&mut tape, &[vec![1.0]]);
        let v = vars(&mut tape, &[vec![1.0]]);
        assert!(crr_loss(&mut tape, &w, &v, &[1], 1.0).is_err());
    }

    #[test]
    fn mlm_cases() {
        let mut tape = Tape::new();
        let hidden = tape.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap().requires_grad(true));
        let decoder = tape.leaf(Tensor::matrix(2, 8, vec![0.1; 16]).unwrap().requires_grad(true));
        let bias = tape.leaf(Tensor::zeros(&[8]).requires_grad(true));
        let empty = mlm_loss(&mut tape, hidden, &MlmTargets::default(), decoder, bias).unwrap();
        assert_eq!(tape.scalar(empty), 0.0);
        // zero hidden states and bias give uniform logits over V = 8
        let t = MlmTargets { positions: vec![0, 2], original_ids: vec![3, 5] };
        let l = mlm_loss(&mut tape, hidden, &t, decoder, bias).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 8f64.ln(), epsilon = 1e-12);
        let bad = MlmTargets { positions: vec![3], original_ids: vec![1] };
        assert!(mlm_loss(&mut tape, hidden, &bad, decoder, bias).is_err());
    }

    #[test]
    fn mlm_gradient_check() {
        let mut rng = crate::seeded_rng(2);
        let mut rand = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let hidden = Tensor::matrix(4, 3, rand(12)).unwrap();
        let decoder = Tensor::matrix(3, 9, rand(27)).unwrap();
        let bias = Tensor::vector(rand(9));
        let targets = MlmTargets { positions: vec![1, 3, 1], original_ids: vec![8, 0, 4] };
        let r = finite_difference_check(
            |t, v| mlm_loss(t, v[0], &targets, v[1], v[2]),
            &[hidden, decoder, bias],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn total_is_plain_sum() {
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        let t = total_loss(0.5514, 0.3133, 8f64.ln()).unwrap();
        assert_abs_diff_eq!(t.total, 2.9441, epsilon = 5e-5);
        match total_loss(0.1, f64::NAN, 0.2) {
            Err(Error::NonFinite(m)) => assert!(m.contains("l_crr")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
