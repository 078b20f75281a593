//! The copy benchmark: remember `K` payload tokens, wait through `T`
//! blanks, and reproduce the payload after a marker.
//!
//! Sequences have length `T + 2K` over an alphabet of `L` payload symbols
//! plus two specials, blank (`L`) and marker (`L + 1`). The input carries
//! the payload in its first `K` positions and the marker at position
//! `T + K`; the target is blank everywhere except the last `K` positions,
//! which repeat the payload in order. Guessing the recall positions
//! uniformly yields the memoryless baseline cross entropy
//! `K ln(L) / (T + 2K)`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::seeded_rng;

/// Shape and seed of one copy-task dataset.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CopyTaskSpec {
    /// Blank span `T` between payload and marker.
    #[serde(rename = "t")]
    pub blank_len: usize,
    /// Payload length `K`.
    #[serde(rename = "k")]
    pub payload_len: usize,
    /// Alphabet size `L` (payload symbols are `0..L`).
    #[serde(rename = "l")]
    pub alphabet: usize,
    pub batch: usize,
    pub seed: u64,
}

impl CopyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blank_len < 1 || self.payload_len < 1 {
            return Err(Error::InvalidConfig(
                "copy task needs blank_len >= 1 and payload_len >= 1".into(),
            ));
        }
        if self.alphabet < 2 {
            return Err(Error::InvalidConfig("copy task needs an alphabet of >= 2".into()));
        }
        if self.batch < 1 {
            return Err(Error::InvalidConfig("copy task needs batch >= 1".into()));
        }
        Ok(())
    }

    /// Sequence length `T + 2K`.
    pub fn seq_len(&self) -> usize {
        self.blank_len + 2 * self.payload_len
    }

    /// Token vocabulary: payload symbols plus blank and marker.
    pub fn vocab(&self) -> usize {
        self.alphabet + 2
    }

    pub fn blank_token(&self) -> usize {
        self.alphabet
    }

    pub fn marker_token(&self) -> usize {
        self.alphabet + 1
    }

    /// Cross entropy of the memoryless strategy that knows the layout but
    /// guesses recall tokens uniformly: `K ln(L) / (T + 2K)`.
    pub fn baseline_loss(&self) -> f64 {
        self.payload_len as f64 * (self.alphabet as f64).ln() / self.seq_len() as f64
    }
}

/// One batch of token sequences, indexed `[sequence][position]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyTaskBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Generates a seeded batch: payload tokens i.i.d. uniform over the
/// alphabet, deterministic layout as described on the module.
pub fn generate_copy_batch(spec: &CopyTaskSpec) -> Result<CopyTaskBatch> {
    spec.validate()?;
    let s = spec.seq_len();
    let k = spec.payload_len;
    let blank = spec.blank_token();
    let marker = spec.marker_token();
    let mut rng = seeded_rng(spec.seed);

    let mut inputs = Vec::with_capacity(spec.batch);
    let mut targets = Vec::with_capacity(spec.batch);
    for _ in 0..spec.batch {
        let payload: Vec<usize> = (0..k).map(|_| rng.gen_range(0..spec.alphabet)).collect();
        let mut input = vec![blank; s];
        input[..k].copy_from_slice(&payload);
        input[spec.blank_len + k] = marker;
        let mut target = vec![blank; s];
        target[s - k..].copy_from_slice(&payload);
        inputs.push(input);
        targets.push(target);
    }
    Ok(CopyTaskBatch { inputs, targets })
}

/// One-hot encodes token sequences into per-timestep blocks of shape
/// `vocab x batch`.
pub fn one_hot_sequences(tokens: &[Vec<usize>], vocab: usize) -> Vec<DMatrix<f64>> {
    let bsz = tokens.len();
    let s = tokens[0].len();
    (0..s)
        .map(|t| {
            let mut block = DMatrix::zeros(vocab, bsz);
            for (b, seq) in tokens.iter().enumerate() {
                block[(seq[t], b)] = 1.0;
            }
            block
        })
        .collect()
}

fn check_logit_shapes(logits: &[DMatrix<f64>], targets: &[Vec<usize>]) -> Result<(usize, usize)> {
    let bsz = targets.len();
    let s = logits.len();
    if bsz == 0 || s == 0 {
        return Err(Error::DimensionMismatch("empty logits or targets".into()));
    }
    if targets.iter().any(|seq| seq.len() != s) {
        return Err(Error::DimensionMismatch(
            "target sequence length does not match logits".into(),
        ));
    }
    let vocab = logits[0].nrows();
    for block in logits {
        if block.nrows() != vocab || block.ncols() != bsz {
            return Err(Error::DimensionMismatch(
                "logit blocks have inconsistent shapes".into(),
            ));
        }
    }
    Ok((s, vocab))
}

/// Mean token-level cross entropy over all positions and sequences
/// (natural log).
pub fn cross_entropy(logits: &[DMatrix<f64>], targets: &[Vec<usize>]) -> Result<f64> {
    Ok(cross_entropy_impl(logits, targets, false)?.0)
}

/// Cross entropy plus its gradient with respect to the logits
/// (`softmax - onehot`, scaled by `1 / (positions * batch)`).
pub fn cross_entropy_with_grads(
    logits: &[DMatrix<f64>],
    targets: &[Vec<usize>],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let (loss, grads) = cross_entropy_impl(logits, targets, true)?;
    Ok((loss, grads.unwrap()))
}

fn cross_entropy_impl(
    logits: &[DMatrix<f64>],
    targets: &[Vec<usize>],
    with_grads: bool,
) -> Result<(f64, Option<Vec<DMatrix<f64>>>)> {
    let (s, vocab) = check_logit_shapes(logits, targets)?;
    let bsz = targets.len();
    let scale = 1.0 / (s * bsz) as f64;
    let mut loss = 0.0;
    let mut grads = if with_grads { Some(Vec::with_capacity(s)) } else { None };

    for (t, block) in logits.iter().enumerate() {
        let mut g = if with_grads {
            Some(DMatrix::zeros(vocab, bsz))
        } else {
            None
        };
        for (b, target_seq) in targets.iter().enumerate() {
            let target = target_seq[t];
            if target >= vocab {
                return Err(Error::DimensionMismatch(format!(
                    "target token {target} outside vocabulary {vocab}"
                )));
            }
            let col = block.column(b);
            let max = col.max();
            let mut sum = 0.0;
            for r in 0..vocab {
                sum += (col[r] - max).exp();
            }
            let lse = max + sum.ln();
            loss += (lse - col[target]) * scale;
            if let Some(g) = g.as_mut() {
                for r in 0..vocab {
                    g[(r, b)] = (col[r] - lse).exp() * scale;
                }
                g[(target, b)] -= scale;
            }
        }
        if let (Some(gs), Some(g)) = (grads.as_mut(), g) {
            gs.push(g);
        }
    }
    Ok((loss, grads))
}

/// Fraction of correct argmax tokens over the last `payload_len` positions
/// only (the recall window).
pub fn recall_accuracy(
    logits: &[DMatrix<f64>],
    targets: &[Vec<usize>],
    payload_len: usize,
) -> Result<f64> {
    let (s, _) = check_logit_shapes(logits, targets)?;
    if payload_len == 0 || payload_len > s {
        return Err(Error::DimensionMismatch(format!(
            "recall window {payload_len} outside sequence length {s}"
        )));
    }
    let bsz = targets.len();
    let mut correct = 0usize;
    for t in s - payload_len..s {
        let block = &logits[t];
        for b in 0..bsz {
            let col = block.column(b);
            let mut best = 0usize;
            for r in 1..col.len() {
                if col[r] > col[best] {
                    best = r;
                }
            }
            if best == targets[b][t] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (payload_len * bsz) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};

    fn spec(t: usize, k: usize, l: usize, batch: usize, seed: u64) -> CopyTaskSpec {
        CopyTaskSpec {
            blank_len: t,
            payload_len: k,
            alphabet: l,
            batch,
            seed,
        }
    }

    #[test]
    fn layout_matches_displayed_example() {
        // T = 10, K = 5, L = 9: payload, ten blanks, marker, four blanks;
        // target is fifteen blanks then the payload.
        let s = spec(10, 5, 9, 3, 42);
        let batch = generate_copy_batch(&s).unwrap();
        for (input, target) in batch.inputs.iter().zip(&batch.targets) {
            assert_eq!(input.len(), 20);
            let payload = &input[..5];
            assert!(payload.iter().all(|&p| p < 9));
            assert!(input[5..15].iter().all(|&x| x == s.blank_token()));
            assert_eq!(input[15], s.marker_token());
            assert!(input[16..].iter().all(|&x| x == s.blank_token()));
            assert!(target[..15].iter().all(|&x| x == s.blank_token()));
            assert_eq!(&target[15..], payload);
        }
    }

    #[test]
    fn minimal_sizes_follow_the_layout_rule() {
        let s = spec(1, 1, 2, 1, 7);
        let batch = generate_copy_batch(&s).unwrap();
        let input = &batch.inputs[0];
        let target = &batch.targets[0];
        assert_eq!(input.len(), 3);
        assert!(input[0] < 2);
        assert_eq!(input[1], s.blank_token());
        assert_eq!(input[2], s.marker_token());
        assert_eq!(target[..2], vec![s.blank_token(); 2][..]);
        assert_eq!(target[2], input[0]);
    }

    #[test]
    fn same_seed_same_batch() {
        let s = spec(4, 3, 5, 8, 123);
        assert_eq!(generate_copy_batch(&s).unwrap(), generate_copy_batch(&s).unwrap());
        let mut s2 = s;
        s2.seed = 124;
        assert_ne!(generate_copy_batch(&s).unwrap(), generate_copy_batch(&s2).unwrap());
    }

    #[test]
    fn invariants_rejected() {
        assert!(generate_copy_batch(&spec(0, 1, 2, 1, 0)).is_err());
        assert!(generate_copy_batch(&spec(1, 0, 2, 1, 0)).is_err());
        assert!(generate_copy_batch(&spec(1, 1, 1, 1, 0)).is_err());
    }

    #[test]
    fn baseline_loss_values() {
        let s = spec(200, 10, 9, 1, 0);
        assert!((s.baseline_loss() - 10.0 * 9.0f64.ln() / 220.0).abs() < 1e-15);
        assert!((s.baseline_loss() - 0.09987).abs() < 1e-4);

        let tiny = spec(1, 1, 2, 1, 0);
        assert!((tiny.baseline_loss() - 2.0f64.ln() / 3.0).abs() < 1e-15);

        // The baseline vanishes as the blank span grows.
        let long = spec(1_000_000, 1, 2, 1, 0);
        assert!(long.baseline_loss() < 1e-5);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let s = spec(3, 2, 4, 2, 1);
        let batch = generate_copy_batch(&s).unwrap();
        let logits: Vec<DMatrix<f64>> = (0..s.seq_len())
            .map(|_| DMatrix::from_element(s.vocab(), 2, 0.7))
            .collect();
        let ce = cross_entropy(&logits, &batch.targets).unwrap();
        assert!((ce - (s.vocab() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let s = spec(3, 2, 4, 3, 5);
        let batch = generate_copy_batch(&s).unwrap();
        let logits: Vec<DMatrix<f64>> = (0..s.seq_len())
            .map(|t| {
                let mut block = DMatrix::zeros(s.vocab(), 3);
                for b in 0..3 {
                    block[(batch.targets[b][t], b)] = 50.0;
                }
                block
            })
            .collect();
        let ce = cross_entropy(&logits, &batch.targets).unwrap();
        assert!(ce < 1e-12);
        assert_eq!(recall_accuracy(&logits, &batch.targets, 2).unwrap(), 1.0);
    }

    #[test]
    fn structured_blank_predictor_recovers_the_baseline() {
        // Blank with a huge margin off the recall window, uniform over the
        // payload alphabet inside it: the cross entropy equals the
        // memoryless baseline and the recall accuracy collapses.
        let s = spec(10, 5, 9, 4, 9);
        let batch = generate_copy_batch(&s).unwrap();
        let recall_start = s.seq_len() - s.payload_len;
        let logits: Vec<DMatrix<f64>> = (0..s.seq_len())
            .map(|t| {
                let mut block = DMatrix::from_element(s.vocab(), 4, -1e4);
                for b in 0..4 {
                    if t < recall_start {
                        block[(s.blank_token(), b)] = 0.0;
                    } else {
                        for a in 0..s.alphabet {
                            block[(a, b)] = 0.0;
                        }
                    }
                }
                block
            })
            .collect();
        let ce = cross_entropy(&logits, &batch.targets).unwrap();
        assert!((ce - s.baseline_loss()).abs() < 1e-12);
        // A uniform recall guess has argmax at token 0; accuracy is the
        // chance rate of the sampled payload rather than zero by fiat.
        let acc = recall_accuracy(&logits, &batch.targets, s.payload_len).unwrap();
        assert!(acc <= 0.4, "uniform guessing should not recall, got {acc}");

        // Blank everywhere scores zero recall.
        let all_blank: Vec<DMatrix<f64>> = (0..s.seq_len())
            .map(|_| {
                let mut block = DMatrix::from_element(s.vocab(), 4, -1e4);
                for b in 0..4 {
                    block[(s.blank_token(), b)] = 0.0;
                }
                block
            })
            .collect();
        assert_eq!(
            recall_accuracy(&all_blank, &batch.targets, s.payload_len).unwrap(),
            0.0
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let s = spec(2, 1, 3, 2, 77);
        let batch = generate_copy_batch(&s).unwrap();
        let base: Vec<f64> = (0..s.seq_len() * s.vocab() * 2)
            .map(|i| ((i * 37 % 13) as f64 - 6.0) / 4.0)
            .collect();
        let unpack = |flat: &[f64]| -> Vec<DMatrix<f64>> {
            flat.chunks(s.vocab() * 2)
                .map(|c| DMatrix::from_column_slice(s.vocab(), 2, c))
                .collect()
        };
        let (_, grads) = cross_entropy_with_grads(&unpack(&base), &batch.targets).unwrap();
        let flat_grads: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.as_slice().to_vec())
            .collect();
        let fd = finite_difference_gradient(
            |p| cross_entropy(&unpack(p), &batch.targets),
            &base,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&flat_grads, &fd) < 1e-8);
    }

    #[test]
    fn shape_mismatches_rejected() {
        let s = spec(1, 1, 2, 2, 0);
        let batch = generate_copy_batch(&s).unwrap();
        let wrong: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::zeros(s.vocab(), 2)).collect();
        assert!(cross_entropy(&wrong, &batch.targets).is_err());
        let bad_vocab: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::zeros(2, 2)).collect();
        assert!(cross_entropy(&bad_vocab, &batch.targets).is_err());
    }
}
