//! Dropout variants for recurrent training. All masks use inverted scaling
//! so evaluation needs no rescale pass.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;

/// Drops whole words from the embedding table for one segment: every
/// occurrence of a dropped id reads as a zero vector, survivors scale by
/// 1/(1-p). Returns the per-id row scale for the ids that appear.
pub fn word_embedding_dropout<F: Scalar>(
    ids: &[usize],
    p: f64,
    rng: &mut impl Rng,
) -> BTreeMap<usize, F> {
    assert!((0.0..1.0).contains(&p), "drop probability must be in [0, 1)");
    let mut scales = BTreeMap::new();
    if p == 0.0 {
        return scales;
    }
    let keep = F::from_f64(1.0 / (1.0 - p));
    // distinct ids in sorted order so the coin sequence is reproducible
    // regardless of occurrence order
    for &id in ids {
        scales.entry(id).or_insert(F::zero());
    }
    for scale in scales.values_mut() {
        *scale = if rng.gen::<f64>() < p { F::zero() } else { keep };
    }
    scales
}

/// Applies a word-dropout scale map to a gathered batch of embedding rows.
/// `ids` must be the same sequence the rows were gathered with.
pub fn apply_word_scales<F: Scalar>(rows: &mut Tensor<F>, ids: &[usize], scales: &BTreeMap<usize, F>) {
    assert_eq!(rows.rows(), ids.len());
    if scales.is_empty() {
        return;
    }
    for (r, &id) in ids.iter().enumerate() {
        if let Some(&s) = scales.get(&id) {
            for v in rows.row_mut(r) {
                *v = *v * s;
            }
        }
    }
}

/// One Bernoulli mask per (sequence, unit), reused across all steps of a
/// segment. Multiply each step's batch x width activation by this mask.
pub fn variational_dropout_mask<F: Scalar>(
    batch: usize,
    width: usize,
    p: f64,
    rng: &mut impl Rng,
) -> Tensor<F> {
    assert!((0.0..1.0).contains(&p), "drop probability must be in [0, 1)");
    let keep = F::from_f64(1.0 / (1.0 - p));
    let mut mask = Tensor::zeros(batch, width);
    for v in mask.data_mut() {
        *v = if rng.gen::<f64>() < p { F::zero() } else { keep };
    }
    mask
}

/// Tiles a batch x width mask over a (steps*batch) x width step-major
/// activation matrix, giving each sequence the same mask at every step.
pub fn tile_mask_over_steps<F: Scalar>(mask: &Tensor<F>, steps: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(steps * mask.len());
    for _ in 0..steps {
        data.extend_from_slice(mask.data());
    }
    Tensor::from_vec(steps * mask.rows(), mask.cols(), data)
}

/// DropConnect on recurrent weights: one mask per matrix per segment, applied
/// to the weights themselves rather than activations.
pub fn weight_drop<F: Scalar>(weights: &[&Tensor<F>], p: f64, rng: &mut impl Rng) -> Vec<Tensor<F>> {
    assert!((0.0..1.0).contains(&p), "drop probability must be in [0, 1)");
    let keep = F::from_f64(1.0 / (1.0 - p));
    weights
        .iter()
        .map(|w| {
            let mut masked = (*w).clone();
            for v in masked.data_mut() {
                *v = if rng.gen::<f64>() < p { F::zero() } else { *v * keep };
            }
            masked
        })
        .collect()
}
