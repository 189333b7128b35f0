//! Task losses: CTC with a path-enumeration oracle, cross-entropy for the
//! classification head, the L2 context loss, and the weighted total.
//!
//! Blank is reserved at vocabulary index 0 everywhere.

use crate::tensor::{logsumexp_values, Tape, Tensor, TensorError, TensorId};
use thiserror::Error;

pub const BLANK: usize = 0;

#[derive(Debug, Error)]
pub enum LossError {
    /// The target cannot be emitted in the available frames. Generation
    /// guarantees feasibility, so hitting this means corrupt data or a bug —
    /// it is never folded into an infinite loss.
    #[error("infeasible ctc target: {frames} frames < {required} required (U={tokens} + {repeat_pairs} adjacent repeats)")]
    InfeasibleTarget { frames: usize, required: usize, tokens: usize, repeat_pairs: usize },
    #[error("ctc target token {token} outside [1, {vocab})")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("brute-force guard exceeded: V^T = {vocab}^{frames} > 10^6")]
    BruteForceGuard { vocab: usize, frames: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("negative context loss weight alpha = {alpha}")]
    NegativeAlpha { alpha: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Token sequence for CTC training. Tokens are strictly positive (blank = 0
/// is reserved for the loss machinery and never appears in a target).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcTarget {
    tokens: Vec<usize>,
}

impl CtcTarget {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t == BLANK) {
            return Err(LossError::TokenOutOfRange { token: t, vocab: 0 });
        }
        Ok(CtcTarget { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn adjacent_repeat_pairs(&self) -> usize {
        self.tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum frame count that admits at least one valid alignment:
    /// one frame per token plus a separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeat_pairs()
    }

    /// Every token must be emittable by a V-way output head.
    pub fn validate_vocab(&self, vocab: usize) -> Result<()> {
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(LossError::TokenOutOfRange { token: t, vocab });
        }
        Ok(())
    }
}

fn check_feasible(target: &CtcTarget, frames: usize) -> Result<()> {
    let required = target.min_frames();
    if frames < required {
        return Err(LossError::InfeasibleTarget {
            frames,
            required,
            tokens: target.len(),
            repeat_pairs: target.adjacent_repeat_pairs(),
        });
    }
    Ok(())
}

/// Extended label sequence: blanks interleaved around every token,
/// length 2U+1. Position s holds blank when s is even, token s/2 when odd.
fn extended_label(target: &CtcTarget, s: usize) -> usize {
    if s % 2 == 0 {
        BLANK
    } else {
        target.tokens()[s / 2]
    }
}

/// CTC loss by the forward recursion over the extended label sequence,
/// composed from tape ops so the gradient flows back into `log_probs`.
///
/// `log_probs` is T×V with log-softmax-normalized rows. The recursion keeps
/// every α value as a tape scalar and combines them with `logsumexp`; cells
/// that no valid alignment can reach are never materialized, so no −∞
/// placeholders enter the graph.
pub fn ctc_loss(tape: &mut Tape, log_probs: TensorId, target: &CtcTarget) -> Result<TensorId> {
    let (frames, vocab) = tape.value(log_probs).dims2()?;
    target.validate_vocab(vocab)?;
    check_feasible(target, frames)?;

    let s_len = 2 * target.len() + 1;
    // alpha[s]: log-probability node of all alignment prefixes ending in
    // extended position s at the current frame; None where unreachable.
    let mut alpha: Vec<Option<TensorId>> = vec![None; s_len];
    for s in 0..s_len.min(2) {
        alpha[s] = Some(tape.select(log_probs, extended_label(target, s))?);
    }

    for t in 1..frames {
        let mut next: Vec<Option<TensorId>> = vec![None; s_len];
        // Positions outside this band cannot both be reached from the start
        // and still finish the target in the frames that remain.
        let s_min = s_len.saturating_sub(2 * (frames - t));
        let s_max = (2 * t + 1).min(s_len - 1);
        for s in s_min..=s_max {
            let mut incoming: Vec<TensorId> = Vec::with_capacity(3);
            if let Some(stay) = alpha[s] {
                incoming.push(stay);
            }
            if s >= 1 {
                if let Some(step) = alpha[s - 1] {
                    incoming.push(step);
                }
            }
            // The skip transition jumps over a blank, which is only valid
            // when the destination is a token that differs from the token
            // two positions back (equal tokens need the blank between them).
            if s >= 2 && extended_label(target, s) != BLANK && extended_label(target, s) != extended_label(target, s - 2) {
                if let Some(skip) = alpha[s - 2] {
                    incoming.push(skip);
                }
            }
            if incoming.is_empty() {
                continue;
            }
            let total = tape.logsumexp(&incoming)?;
            let emit = tape.select(log_probs, t * vocab + extended_label(target, s))?;
            next[s] = Some(tape.add(total, emit)?);
        }
        alpha = next;
    }

    let mut finals: Vec<TensorId> = Vec::with_capacity(2);
    if let Some(last) = alpha[s_len - 1] {
        finals.push(last);
    }
    if s_len >= 2 {
        if let Some(before) = alpha[s_len - 2] {
            finals.push(before);
        }
    }
    debug_assert!(!finals.is_empty(), "feasibility precheck guarantees a reachable final state");
    let log_total = tape.logsumexp(&finals)?;
    Ok(tape.scale(log_total, -1.0)?)
}

/// Collapse a raw frame-label path: merge consecutive repeats, then drop
/// blanks.
fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev {
            if p != BLANK {
                out.push(p);
            }
            prev = Some(p);
        }
    }
    out
}

/// Independent CTC reference: enumerate every V^T frame-label path, keep
/// those that collapse to the target, logsumexp their log-probabilities,
/// negate. Exponential — guarded to V^T ≤ 10^6.
pub fn ctc_brute_force(log_probs: &Tensor, target: &CtcTarget) -> Result<f64> {
    let (frames, vocab) = log_probs.dims2()?;
    target.validate_vocab(vocab)?;
    let total_paths = (vocab as f64).powi(frames as i32);
    if total_paths > 1e6 {
        return Err(LossError::BruteForceGuard { vocab, frames });
    }

    let lp = log_probs.data();
    let mut matching = Vec::new();
    let mut path = vec![0usize; frames];
    loop {
        if collapse_path(&path) == target.tokens() {
            let score: f64 = path.iter().enumerate().map(|(t, &v)| lp[t * vocab + v]).sum();
            matching.push(score);
        }
        // Odometer increment in base V.
        let mut carry = frames;
        for i in (0..frames).rev() {
            path[i] += 1;
            if path[i] < vocab {
                carry = i;
                break;
            }
            path[i] = 0;
        }
        if carry == frames {
            break;
        }
    }

    if matching.is_empty() {
        return Err(LossError::InfeasibleTarget {
            frames,
            required: target.min_frames(),
            tokens: target.len(),
            repeat_pairs: target.adjacent_repeat_pairs(),
        });
    }
    Ok(-logsumexp_values(&matching)?)
}

/// Greedy CTC decoding: per-frame argmax (ties to the lowest index),
/// merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Result<Vec<usize>> {
    let (frames, vocab) = log_probs.dims2()?;
    let lp = log_probs.data();
    let mut path = Vec::with_capacity(frames);
    for t in 0..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        path.push(best);
    }
    Ok(collapse_path(&path))
}

/// Cross-entropy −log_softmax(logits)[label], composed as
/// logsumexp(logits) − logits[label] so it stays stable for any magnitude.
/// `logits` may be a length-C vector or a 1×C row.
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, label: usize) -> Result<TensorId> {
    let classes = tape.value(logits).numel();
    if tape.value(logits).rank() == 2 {
        let (rows, _) = tape.value(logits).dims2()?;
        if rows != 1 {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("expected a single logit row, got {:?}", tape.value(logits).shape()),
            }
            .into());
        }
    }
    if label >= classes {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    let elems: Vec<TensorId> = (0..classes).map(|i| tape.select(logits, i)).collect::<crate::tensor::Result<_>>()?;
    let lse = tape.logsumexp(&elems)?;
    let picked = tape.scale(elems[label], -1.0)?;
    Ok(tape.add(lse, picked)?)
}

/// Context loss: Euclidean distance between the generated and the reference
/// context embedding. Symmetric in its arguments.
pub fn context_loss(tape: &mut Tape, e_j: TensorId, e_i: TensorId) -> Result<TensorId> {
    Ok(tape.l2_distance(e_j, e_i)?)
}

/// Task loss plus α-weighted context loss, with the graph node to call
/// backward on.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub task_loss: f64,
    pub context_loss: f64,
    pub total: f64,
    pub alpha: f64,
    pub total_node: TensorId,
}

/// Combine `total = task + alpha·ctx`, evaluated in exactly that order.
/// `alpha == 0` returns the task node untouched: the total is bit-identical
/// to the task loss and no gradient flows through `ctx`.
pub fn total_loss(tape: &mut Tape, task: TensorId, ctx: TensorId, alpha: f64) -> Result<LossBundle> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(LossError::NegativeAlpha { alpha });
    }
    let task_val = tape.value(task).item();
    let ctx_val = tape.value(ctx).item();
    if alpha == 0.0 {
        return Ok(LossBundle { task_loss: task_val, context_loss: ctx_val, total: task_val, alpha, total_node: task });
    }
    let weighted = tape.scale(ctx, alpha)?;
    let total_node = tape.add(task, weighted)?;
    Ok(LossBundle {
        task_loss: task_val,
        context_loss: ctx_val,
        total: tape.value(total_node).item(),
        alpha,
        total_node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random T×V matrix with log-softmax-normalized rows.
    fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Tensor {
        let mut data = Vec::with_capacity(frames * vocab);
        for _ in 0..frames {
            let row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lse = logsumexp_values(&row).unwrap();
            data.extend(row.iter().map(|v| v - lse));
        }
        Tensor::new(vec![frames, vocab], data).unwrap()
    }

    fn uniform_log_probs(frames: usize, vocab: usize) -> Tensor {
        let v = -(vocab as f64).ln();
        Tensor::new(vec![frames, vocab], vec![v; frames * vocab]).unwrap()
    }

    fn ctc_value(log_probs: &Tensor, target: &CtcTarget) -> Result<f64> {
        let mut tape = Tape::new();
        let lp = tape.constant(log_probs.clone());
        let loss = ctc_loss(&mut tape, lp, target)?;
        Ok(tape.value(loss).item())
    }

    #[test]
    fn ctc_single_frame_single_token() {
        let lp = uniform_log_probs(1, 3);
        let target = CtcTarget::new(vec![1]).unwrap();
        let loss = ctc_value(&lp, &target).unwrap();
        assert!((loss - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lp = random_log_probs(&mut rng, 4, 3);
        let target = CtcTarget::new(vec![]).unwrap();
        let loss = ctc_value(&lp, &target).unwrap();
        let expected: f64 = -(0..4).map(|t| lp.data()[t * 3 + BLANK]).sum::<f64>();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ctc_infeasible_is_hard_error() {
        let lp = uniform_log_probs(2, 3);
        let target = CtcTarget::new(vec![1, 1, 2]).unwrap();
        assert_eq!(target.min_frames(), 4);
        assert!(matches!(ctc_value(&lp, &target), Err(LossError::InfeasibleTarget { .. })));
        assert!(matches!(ctc_brute_force(&lp, &target), Err(LossError::InfeasibleTarget { .. })));
    }

    #[test]
    fn ctc_token_out_of_vocab_is_error() {
        let lp = uniform_log_probs(3, 3);
        let target = CtcTarget::new(vec![1, 3]).unwrap();
        assert!(matches!(ctc_value(&lp, &target), Err(LossError::TokenOutOfRange { token: 3, vocab: 3 })));
    }

    #[test]
    fn ctc_target_rejects_blank() {
        assert!(CtcTarget::new(vec![1, 0, 2]).is_err());
    }

    #[test]
    fn brute_force_hand_enumeration() {
        // T=2, V=2, target=[1]: collapsing paths are (1,0), (0,1), (1,1).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lp = random_log_probs(&mut rng, 2, 2);
        let d = lp.data();
        let target = CtcTarget::new(vec![1]).unwrap();
        let paths = [d[1] + d[2], d[0] + d[3], d[1] + d[3]];
        let expected = -logsumexp_values(&paths).unwrap();
        let got = ctc_brute_force(&lp, &target).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let forward = ctc_value(&lp, &target).unwrap();
        assert!((forward - expected).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard_trips() {
        let lp = uniform_log_probs(21, 2);
        let target = CtcTarget::new(vec![1]).unwrap();
        assert!(matches!(ctc_brute_force(&lp, &target), Err(LossError::BruteForceGuard { .. })));
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut max_diff = 0.0_f64;
        for case in 0..100 {
            let frames = rng.random_range(1..=5);
            let vocab = rng.random_range(2..=3);
            let lp = random_log_probs(&mut rng, frames, vocab);
            // Rejection-sample a feasible target for this frame count.
            let target = loop {
                let len = rng.random_range(0..=3.min(frames));
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..vocab)).collect();
                let t = CtcTarget::new(tokens).unwrap();
                if t.min_frames() <= frames {
                    break t;
                }
            };
            let fast = ctc_value(&lp, &target).unwrap();
            let slow = ctc_brute_force(&lp, &target).unwrap();
            max_diff = max_diff.max((fast - slow).abs());
            assert!((fast - slow).abs() < 1e-9, "case {}: {} vs {}", case, fast, slow);
        }
        assert!(max_diff < 1e-9);
    }

    #[test]
    fn ctc_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let frames = rng.random_range(1..=6);
            let lp = random_log_probs(&mut rng, frames, 3);
            let target = loop {
                let len = rng.random_range(0..=3.min(frames));
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..3)).collect();
                let t = CtcTarget::new(tokens).unwrap();
                if t.min_frames() <= frames {
                    break t;
                }
            };
            let loss = ctc_value(&lp, &target).unwrap();
            assert!(loss >= 0.0, "loss {} for target {:?}", loss, target.tokens());
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let frames = rng.random_range(2..=5);
            let lp = random_log_probs(&mut rng, frames, 3);
            let target = loop {
                let len = rng.random_range(1..=2.min(frames));
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..3)).collect();
                let t = CtcTarget::new(tokens).unwrap();
                if t.min_frames() <= frames {
                    break t;
                }
            };
            // Check through the raw DP (inputs treated as free parameters;
            // row normalization is not required for differentiability).
            let worst = grad_check(&[lp], 1e-5, |tape, ids| {
                ctc_loss(tape, ids[0], &target).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => panic!("unexpected non-tensor error in grad check: {other}"),
                })
            })
            .unwrap();
            assert!(worst < 1e-4, "worst rel err {}", worst);
        }
    }

    #[test]
    fn greedy_decode_blank_separates_repeats() {
        // Frame argmaxes 1,1,0,1 → collapse to [1,1].
        let rows = [
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.6, 0.3],
        ];
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p: &f64| p.ln())).collect();
        let lp = Tensor::new(vec![4, 3], data).unwrap();
        assert_eq!(ctc_greedy_decode(&lp).unwrap(), vec![1, 1]);
    }

    #[test]
    fn greedy_decode_all_blank_is_empty() {
        let rows = [vec![0.8, 0.1, 0.1], vec![0.9, 0.05, 0.05]];
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p: &f64| p.ln())).collect();
        let lp = Tensor::new(vec![2, 3], data).unwrap();
        assert_eq!(ctc_greedy_decode(&lp).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn greedy_decode_collapses_run() {
        let rows = [vec![0.1, 0.1, 0.8], vec![0.1, 0.2, 0.7], vec![0.05, 0.05, 0.9]];
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|p: &f64| p.ln())).collect();
        let lp = Tensor::new(vec![3, 3], data).unwrap();
        assert_eq!(ctc_greedy_decode(&lp).unwrap(), vec![2]);
    }

    #[test]
    fn greedy_decode_tie_takes_lowest_index() {
        let lp = uniform_log_probs(2, 3);
        // Every element ties; lowest index is blank → empty decode.
        assert_eq!(ctc_greedy_decode(&lp).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let loss = cross_entropy(&mut tape, logits, 1).unwrap();
        assert!((tape.value(loss).item() - 3.0_f64.ln()).abs() < 1e-12);

        let peaked = tape.constant(Tensor::vector(vec![0.0, 1e3, 0.0]));
        let loss = cross_entropy(&mut tape, peaked, 1).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        assert!(matches!(cross_entropy(&mut tape, logits, 3), Err(LossError::LabelOutOfRange { .. })));
    }

    #[test]
    fn cross_entropy_grad_check() {
        let logits = Tensor::vector(vec![0.4, -1.2, 0.9, 0.1]);
        let worst = grad_check(&[logits], 1e-5, |tape, ids| {
            cross_entropy(tape, ids[0], 2).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => panic!("unexpected error: {other}"),
            })
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {}", worst);
    }

    #[test]
    fn context_loss_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![4.0, 5.0]));
        let d = context_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(d).item(), 5.0);
        let d_rev = context_loss(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(d_rev).item(), 5.0);
        let zero = context_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    #[test]
    fn context_loss_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let v = |rng: &mut ChaCha8Rng| {
                Tensor::vector((0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
            };
            let (a, b, c) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let mut tape = Tape::new();
            let (ia, ib, ic) = (tape.constant(a), tape.constant(b), tape.constant(c));
            let ab = context_loss(&mut tape, ia, ib).unwrap();
            let bc = context_loss(&mut tape, ib, ic).unwrap();
            let ac = context_loss(&mut tape, ia, ic).unwrap();
            let (ab, bc, ac) = (tape.value(ab).item(), tape.value(bc).item(), tape.value(ac).item());
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn total_loss_alpha_zero_is_bit_exact_passthrough() {
        let mut tape = Tape::new();
        let task = tape.leaf(Tensor::scalar(1.234567890123), true);
        let ctx = tape.leaf(Tensor::scalar(0.777), true);
        let bundle = total_loss(&mut tape, task, ctx, 0.0).unwrap();
        assert_eq!(bundle.total.to_bits(), bundle.task_loss.to_bits());
        assert_eq!(bundle.total_node, task);
        tape.backward(bundle.total_node).unwrap();
        assert_eq!(tape.grad_or_zeros(ctx), vec![0.0]);
        assert_eq!(tape.grad_or_zeros(task), vec![1.0]);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.5));
        let ctx = tape.constant(Tensor::scalar(0.2));
        let bundle = total_loss(&mut tape, task, ctx, 10.0).unwrap();
        assert!((bundle.total - 3.5).abs() < 1e-15);
        assert_eq!(bundle.total, bundle.task_loss + bundle.alpha * bundle.context_loss);
    }

    #[test]
    fn total_loss_rejects_negative_alpha() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.0));
        let ctx = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(total_loss(&mut tape, task, ctx, -0.1), Err(LossError::NegativeAlpha { .. })));
    }
}
