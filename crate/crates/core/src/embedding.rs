//! Frequency-ordered sparse word embeddings: exponentially decaying
//! per-word trainable prefix lengths at a target density.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum EmbedError {
    #[error("density {density} outside (0, 1]")]
    DensityOutOfRange { density: f64 },
    #[error("density {density} below the minimum {min:.6} reachable with bin width {bin0}")]
    DensityBelowMinimum { density: f64, min: f64, bin0: usize },
    #[error("bin widths sum to {got}, expected {want}")]
    BadBinWidths { got: usize, want: usize },
    #[error("unknown order strategy '{0}' (expected up, down, or none)")]
    UnknownStrategy(String),
}

/// Per-word trainable prefix lengths, indexed by frequency rank (rank 0 is
/// the most frequent word). Lengths never increase with rank.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingAllocation {
    pub vocab_size: usize,
    pub max_len: usize,
    pub density: f64,
    pub alpha: f64,
    /// (width, number of words granted this bin), in dimension order.
    pub bins: Vec<(usize, usize)>,
    pub lengths: Vec<usize>,
}

impl EmbeddingAllocation {
    pub fn total_params(&self) -> u64 {
        self.lengths.iter().map(|&l| l as u64).sum()
    }

    pub fn realized_density(&self) -> f64 {
        self.total_params() as f64 / (self.vocab_size as f64 * self.max_len as f64)
    }

    /// Full-density allocation: every word gets all k dimensions.
    pub fn dense(vocab_size: usize, max_len: usize) -> Self {
        EmbeddingAllocation {
            vocab_size,
            max_len,
            density: 1.0,
            alpha: 1.0,
            bins: vec![(max_len, vocab_size)],
            lengths: vec![max_len; vocab_size],
        }
    }
}

/// `m` bins of as-equal-as-possible widths covering `k` dimensions; earlier
/// bins take the remainder.
pub fn uniform_bins(k: usize, m: usize) -> Vec<usize> {
    assert!(m >= 1 && m <= k, "bin count must be in 1..=k");
    let base = k / m;
    let extra = k % m;
    (0..m).map(|j| base + usize::from(j < extra)).collect()
}

fn density_at(k: usize, bin_widths: &[usize], alpha: f64) -> f64 {
    let mut acc = 0.0;
    let mut pow = 1.0;
    for &w in bin_widths {
        acc += w as f64 * pow;
        pow *= alpha;
    }
    acc / k as f64
}

/// Solves (1/k) * sum_m kappa_m * alpha^m = delta for alpha by bisection on
/// the monotone left-hand side, to absolute tolerance 1e-10.
pub fn solve_alpha(k: usize, delta: f64, bin_widths: &[usize]) -> Result<f64, EmbedError> {
    let width_sum: usize = bin_widths.iter().sum();
    if width_sum != k {
        return Err(EmbedError::BadBinWidths { got: width_sum, want: k });
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(EmbedError::DensityOutOfRange { density: delta });
    }
    let min = bin_widths[0] as f64 / k as f64;
    if delta < min {
        return Err(EmbedError::DensityBelowMinimum { density: delta, min, bin0: bin_widths[0] });
    }
    if delta == 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (1e-9, 1.0);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if density_at(k, bin_widths, mid) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Grants bin m to the round(V * alpha^m) highest-ranked words, then nudges
/// one bin's word count so the total parameter count hits the rounded
/// density target. Bin 0 always covers the whole vocabulary.
pub fn allocate_lengths(
    vocab_size: usize,
    k: usize,
    alpha: f64,
    bin_widths: &[usize],
) -> Result<EmbeddingAllocation, EmbedError> {
    let width_sum: usize = bin_widths.iter().sum();
    if width_sum != k {
        return Err(EmbedError::BadBinWidths { got: width_sum, want: k });
    }
    let v = vocab_size as f64;
    let mut counts: Vec<usize> = Vec::with_capacity(bin_widths.len());
    let mut pow = 1.0;
    for _ in bin_widths {
        counts.push((v * pow).round().min(v) as usize);
        pow *= alpha;
    }
    counts[0] = vocab_size;

    let delta = density_at(k, bin_widths, alpha);
    let target = (delta * k as f64 * v).round() as i64;
    let allocated = |counts: &[usize]| -> i64 {
        counts.iter().zip(bin_widths).map(|(&c, &w)| (c * w) as i64).sum()
    };

    // Compensate rounding: widest bins first, never bin 0, and keep counts
    // non-increasing so every word's granted bins stay a prefix.
    let mut order: Vec<usize> = (1..bin_widths.len()).collect();
    order.sort_by_key(|&m| std::cmp::Reverse(bin_widths[m]));
    for m in order {
        let deficit = target - allocated(&counts);
        if deficit == 0 {
            break;
        }
        let step = deficit.div_euclid(bin_widths[m] as i64)
            + i64::from(deficit.rem_euclid(bin_widths[m] as i64) * 2 >= bin_widths[m] as i64);
        let upper = counts[m - 1];
        let lower = counts.get(m + 1).copied().unwrap_or(0);
        let adjusted = (counts[m] as i64 + step).clamp(lower as i64, upper as i64);
        counts[m] = adjusted as usize;
    }

    let lengths: Vec<usize> = (0..vocab_size)
        .map(|rank| {
            counts
                .iter()
                .zip(bin_widths)
                .take_while(|(&c, _)| c > rank)
                .map(|(_, &w)| w)
                .sum()
        })
        .collect();

    Ok(EmbeddingAllocation {
        vocab_size,
        max_len: k,
        density: delta,
        alpha,
        bins: bin_widths.iter().copied().zip(counts).collect(),
        lengths,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderStrategy {
    Up,
    Down,
    None,
}

impl fmt::Display for OrderStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderStrategy::Up => "up",
            OrderStrategy::Down => "down",
            OrderStrategy::None => "none",
        })
    }
}

impl FromStr for OrderStrategy {
    type Err = EmbedError;
    fn from_str(s: &str) -> Result<Self, EmbedError> {
        match s {
            "up" => Ok(OrderStrategy::Up),
            "down" => Ok(OrderStrategy::Down),
            "none" => Ok(OrderStrategy::None),
            other => Err(EmbedError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Rank order of word ids under a sorting strategy: result[r] is the id
/// placed at rank r. "up" puts the most frequent word first (frequency ties
/// broken by original id), "down" is the exact reverse, "none" is a seeded
/// shuffle.
pub fn apply_order_strategy(frequencies: &[u64], strategy: OrderStrategy, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..frequencies.len()).collect();
    match strategy {
        OrderStrategy::Up => {
            ids.sort_by_key(|&id| (std::cmp::Reverse(frequencies[id]), id));
        }
        OrderStrategy::Down => {
            ids.sort_by_key(|&id| (std::cmp::Reverse(frequencies[id]), id));
            ids.reverse();
        }
        OrderStrategy::None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
        }
    }
    ids
}

/// Embedding table with structural zeros beyond each word's prefix.
/// Word ids index rows directly; callers keep ids in rank order.
#[derive(Clone, Debug)]
pub struct SparseEmbeddingParams<F: Scalar> {
    pub table: Tensor<F>,
    pub lengths_by_id: Vec<usize>,
    pub allocation: EmbeddingAllocation,
}

impl<F: Scalar> SparseEmbeddingParams<F> {
    /// Initializes trainable prefixes uniform in [-scale, scale); the rest of
    /// each row stays exactly zero. Word id equals frequency rank.
    pub fn init(allocation: EmbeddingAllocation, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let rank_to_id: Vec<usize> = (0..allocation.vocab_size).collect();
        Self::init_ordered(allocation, &rank_to_id, scale, rng)
    }

    /// Same, but ranks map to ids through `rank_to_id` (a permutation of the
    /// vocabulary, e.g. from [`apply_order_strategy`]).
    pub fn init_ordered(
        allocation: EmbeddingAllocation,
        rank_to_id: &[usize],
        scale: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let v = allocation.vocab_size;
        let k = allocation.max_len;
        assert_eq!(rank_to_id.len(), v, "permutation must cover the vocabulary");
        let mut lengths_by_id = vec![usize::MAX; v];
        for (rank, &id) in rank_to_id.iter().enumerate() {
            assert!(lengths_by_id[id] == usize::MAX, "rank_to_id must be a permutation");
            lengths_by_id[id] = allocation.lengths[rank];
        }
        let mut table = Tensor::zeros(v, k);
        for w in 0..v {
            for j in 0..lengths_by_id[w] {
                table.set(w, j, F::from_f64(rng.gen_range(-scale..scale)));
            }
        }
        SparseEmbeddingParams { table, lengths_by_id, allocation }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    /// Row copy for one word: trainable prefix values then structural zeros.
    pub fn lookup(&self, word_id: usize) -> Option<&[F]> {
        if word_id >= self.table.rows() {
            return None;
        }
        Some(self.table.row(word_id))
    }

    /// V x k 0/1 mask of trainable positions.
    pub fn structural_mask(&self) -> Tensor<F> {
        let mut mask = Tensor::zeros(self.table.rows(), self.table.cols());
        for (w, &len) in self.lengths_by_id.iter().enumerate() {
            for j in 0..len {
                mask.set(w, j, F::one());
            }
        }
        mask
    }

    /// Mask rows gathered for a batch of ids (for masking looked-up rows).
    pub fn gather_mask_rows(&self, ids: &[usize]) -> Tensor<F> {
        let k = self.table.cols();
        let mut out = Tensor::zeros(ids.len(), k);
        for (r, &id) in ids.iter().enumerate() {
            for j in 0..self.lengths_by_id[id] {
                out.set(r, j, F::one());
            }
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.lengths_by_id.iter().map(|&l| l as u64).sum()
    }
}

/// Allocation summary rows: (rank, frequency, length). Frequencies are the
/// caller's per-rank counts, zeros when unknown.
pub fn allocation_csv(allocation: &EmbeddingAllocation, frequencies: Option<&[u64]>) -> String {
    let mut out = String::from("word_rank,frequency,length\n");
    for (rank, &len) in allocation.lengths.iter().enumerate() {
        let freq = frequencies.map_or(0, |f| f[rank]);
        out.push_str(&format!("{rank},{freq},{len}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_reference_point() {
        let bins = vec![1usize; 20];
        let alpha = solve_alpha(20, 0.2, &bins).unwrap();
        assert!((alpha - 0.751).abs() < 0.003, "alpha = {alpha}");
    }

    #[test]
    fn alpha_full_density_is_one() {
        assert_eq!(solve_alpha(7, 1.0, &vec![1; 7]).unwrap(), 1.0);
    }

    #[test]
    fn alpha_binned_residual_small() {
        let bins = vec![2usize; 10];
        let alpha = solve_alpha(20, 0.5, &bins).unwrap();
        let residual = density_at(20, &bins, alpha) - 0.5;
        assert!(residual.abs() < 1e-9);
    }

    #[test]
    fn alpha_rejects_unreachable_density() {
        // bin 0 alone already gives density 0.5
        assert!(matches!(
            solve_alpha(4, 0.3, &[2, 1, 1]),
            Err(EmbedError::DensityBelowMinimum { .. })
        ));
        assert!(matches!(solve_alpha(4, 1.2, &[1, 1, 1, 1]), Err(EmbedError::DensityOutOfRange { .. })));
    }

    #[test]
    fn allocation_hits_target_total() {
        let bins = vec![1usize; 8];
        let alpha = solve_alpha(8, 0.3, &bins).unwrap();
        let alloc = allocate_lengths(1000, 8, alpha, &bins).unwrap();
        let total = alloc.total_params() as i64;
        assert!((total - 2400).abs() <= 8, "total = {total}");
        // lengths monotone non-increasing

        assert!(alloc.lengths.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn full_density_allocation_is_all_k() {
        let alloc = allocate_lengths(50, 6, 1.0, &vec![1; 6]).unwrap();
        assert!(alloc.lengths.iter().all(|&l| l == 6));
        assert_eq!(alloc.realized_density(), 1.0);
    }

    #[test]
    fn per_dimension_equals_unit_binned() {
        let alpha = solve_alpha(12, 0.4, &vec![1; 12]).unwrap();
        let a = allocate_lengths(300, 12, alpha, &vec![1; 12]).unwrap();
        let b = allocate_lengths(300, 12, alpha, &uniform_bins(12, 12)).unwrap();
        assert_eq!(a.lengths, b.lengths);
    }

    #[test]
    fn realized_density_within_per_word_slack() {
        for (v, k, d) in [(1000, 8, 0.3), (44_000, 20, 0.2), (513, 10, 0.77)] {
            let bins = vec![1usize; k];
            let alpha = solve_alpha(k, d, &bins).unwrap();
            let alloc = allocate_lengths(v, k, alpha, &bins).unwrap();
            assert!(
                (alloc.realized_density() - d).abs() <= 1.0 / v as f64,
                "density {} vs {} at v={v}",
                alloc.realized_density(),
                d
            );
        }
    }

    #[test]
    fn order_strategy_examples() {
        let freqs = [5u64, 1, 9];
        assert_eq!(apply_order_strategy(&freqs, OrderStrategy::Up, 0), vec![2, 0, 1]);
        assert_eq!(apply_order_strategy(&freqs, OrderStrategy::Down, 0), vec![1, 0, 2]);
        let a = apply_order_strategy(&freqs, OrderStrategy::None, 7);
        let b = apply_order_strategy(&freqs, OrderStrategy::None, 7);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn lookup_respects_structural_zeros() {
        let bins = vec![1usize; 4];
        let alpha = solve_alpha(4, 0.5, &bins).unwrap();
        let alloc = allocate_lengths(10, 4, alpha, &bins).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SparseEmbeddingParams::<f64>::init(alloc, 0.1, &mut rng);
        for w in 0..10 {
            let row = params.lookup(w).unwrap();
            let len = params.lengths_by_id[w];
            assert!(len >= 1);
            assert!(row[len..].iter().all(|&x| x == 0.0));
            assert!(row[..len].iter().all(|&x| x != 0.0));
        }
        assert!(params.lookup(10).is_none());
    }
}
