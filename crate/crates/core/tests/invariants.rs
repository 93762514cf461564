//! Randomized structural invariants of the layout solvers.

use proptest::prelude::*;
use sparseq_core::embedding::{allocate_lengths, solve_alpha, uniform_bins};
use sparseq_core::plan::{
    count_lstm_params, expand_plan_to_masks, plan_recurrent_layer, solve_gamma_for_equal_params,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_partitions_hidden_and_counts_match_masks(
        input in 1..24usize,
        hidden in 1..24usize,
        segments in 1..6usize,
        window in 1..24usize,
    ) {
        prop_assume!(segments <= hidden);
        let window = window.min(input);
        let gamma = window as f64 / input as f64;
        let plan = plan_recurrent_layer(input, hidden, segments, gamma, None).unwrap();

        let widths: Vec<usize> = plan.components.iter().map(|c| c.output_width).collect();
        prop_assert_eq!(widths.iter().sum::<usize>(), hidden);
        prop_assert!(widths.iter().all(|&w| w >= 1));
        for pair in plan.components.windows(2) {
            prop_assert!(pair[0].input_offset <= pair[1].input_offset);
        }
        for c in &plan.components {
            prop_assert!(c.input_offset + c.input_width <= input);
        }

        // the mask is a second, independent account of the same structure
        let (mask_hh, mask_hi) = expand_plan_to_masks::<f64>(&plan);
        let nz_hh = mask_hh.data().iter().filter(|&&v| v != 0.0).count() as u64;
        let nz_hi = mask_hi.data().iter().filter(|&&v| v != 0.0).count() as u64;
        prop_assert_eq!(count_lstm_params(&plan), 4 * (nz_hh + nz_hi) + 8 * hidden as u64);
    }

    #[test]
    fn solved_budgets_land_within_rounding_slack(
        input_dense in 8..48usize,
        hidden_dense in 8..48usize,
        extra_hidden in 0..64usize,
        segments in 1..5usize,
    ) {
        let hidden_sparse = hidden_dense + extra_hidden;
        let input_sparse = input_dense + extra_hidden;
        prop_assume!(segments <= hidden_sparse);
        let gamma = match solve_gamma_for_equal_params(
            input_dense, hidden_dense, input_sparse, hidden_sparse, segments,
        ) {
            Ok(g) => g,
            Err(_) => return Ok(()),
        };
        prop_assume!((gamma * input_sparse as f64).round() >= 1.0);
        let sparse = plan_recurrent_layer(input_sparse, hidden_sparse, segments, gamma, None).unwrap();
        let dense = sparseq_core::plan::RecurrentSparsityPlan::dense(input_dense, hidden_dense);
        let diff = count_lstm_params(&sparse) as i64 - count_lstm_params(&dense) as i64;
        // window rounding moves at most half an input column per component row
        prop_assert!(
            diff.unsigned_abs() <= 4 * hidden_sparse as u64 / 2 + 4,
            "diff {} for h_s {}", diff, hidden_sparse
        );
    }

    #[test]
    fn embedding_lengths_are_monotone_and_on_budget(
        vocab in 10..4000usize,
        k in 2..24usize,
        bins in 1..12usize,
        delta_millis in 1..1000u32,
    ) {
        let bins = bins.min(k);
        let widths = uniform_bins(k, bins);
        let delta = delta_millis as f64 / 1000.0;
        prop_assume!(delta >= widths[0] as f64 / k as f64);
        let alpha = solve_alpha(k, delta, &widths).unwrap();
        let alloc = allocate_lengths(vocab, k, alpha, &widths).unwrap();

        prop_assert!(alloc.lengths.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(alloc.lengths.iter().all(|&l| l >= widths[0] && l <= k));
        prop_assert_eq!(alloc.lengths.len(), vocab);

        let target = (delta * k as f64 * vocab as f64).round() as i64;
        let widest = *widths.iter().max().unwrap() as i64;
        prop_assert!(
            (alloc.total_params() as i64 - target).abs() <= widest,
            "total {} target {}", alloc.total_params(), target
        );
    }
}
