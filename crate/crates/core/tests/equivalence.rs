//! The layer of parallel dense components and the masked dense cell are the
//! same function: same outputs, same gradients on the shared parameters,
//! exact zeros where the mask is zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseq_core::plan::{expand_plan_to_masks, plan_recurrent_layer};
use sparseq_core::recurrent::{
    embed_components_into_dense, masked_dense_forward, register_layer, replicate_gate_rows,
    sparse_lstm_forward, DenseLstmNodes, LstmComponentParams, SparseLstmLayer,
};
use sparseq_core::{Tape64, Tensor64};

struct Trial {
    fwd_max: f64,
    grad_max: f64,
}

/// Runs both implementations from identical weights and random inputs,
/// returning the largest forward and gradient discrepancies.
fn run_equivalence_trial(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.gen_range(2..9usize);
    let hidden = rng.gen_range(2..9usize);
    let segments = rng.gen_range(1..=hidden.min(3));
    let window = rng.gen_range(1..=input);
    let gamma = window as f64 / input as f64;
    let plan = plan_recurrent_layer(input, hidden, segments, gamma, None).unwrap();
    let steps = rng.gen_range(1..5usize);
    let batch = rng.gen_range(1..4usize);

    let layer = SparseLstmLayer::<f64>::init(plan.clone(), &mut rng);
    let x_data = Tensor64::uniform(steps * batch, input, -1.0, 1.0, &mut rng);
    let targets: Vec<usize> = (0..steps * batch).map(|_| rng.gen_range(0..hidden)).collect();

    // components path
    let mut tape_a = Tape64::new();
    let nodes_a = register_layer(&mut tape_a, &layer);
    let x_a = tape_a.constant(x_data.clone());
    let out_a = sparse_lstm_forward(&mut tape_a, &plan, &nodes_a, x_a, steps, batch, None).unwrap();
    let cat_a = tape_a.concat_rows(&out_a.outputs).unwrap();
    let loss_a = tape_a.softmax_cross_entropy(cat_a, &targets, None).unwrap();
    tape_a.backward(loss_a).unwrap();

    // masked dense path, same numbers embedded in the dense layout
    let (w_hi, w_hh, b_ih, b_hh) = embed_components_into_dense(&plan, &layer.components);
    let mut tape_b = Tape64::new();
    let dense = DenseLstmNodes {
        w_hi: tape_b.leaf(w_hi),
        w_hh: tape_b.leaf(w_hh),
        b_ih: tape_b.leaf(b_ih),
        b_hh: tape_b.leaf(b_hh),
    };
    let x_b = tape_b.constant(x_data);
    let out_b = masked_dense_forward(&mut tape_b, &plan, dense, x_b, steps, batch, None).unwrap();
    let cat_b = tape_b.concat_rows(&out_b.outputs).unwrap();
    let loss_b = tape_b.softmax_cross_entropy(cat_b, &targets, None).unwrap();
    tape_b.backward(loss_b).unwrap();

    let mut fwd_max: f64 = (tape_a.value(loss_a).scalar() - tape_b.value(loss_b).scalar()).abs();
    for t in 0..steps {
        let a = tape_a.value(out_a.outputs[t]);
        let b = tape_b.value(out_b.outputs[t]);
        for (x, y) in a.data().iter().zip(b.data()) {
            fwd_max = fwd_max.max((x - y).abs());
        }
    }
    // final cell states, component blocks laid side by side
    let dense_final = &out_b.final_states[0];
    let mut col0 = 0;
    for state in &out_a.final_states {
        let width = state.c.cols();
        for b in 0..batch {
            for j in 0..width {
                fwd_max = fwd_max.max((state.c.at(b, j) - dense_final.c.at(b, col0 + j)).abs());
                fwd_max = fwd_max.max((state.h.at(b, j) - dense_final.h.at(b, col0 + j)).abs());
            }
        }
        col0 += width;
    }

    // pack component gradients into the dense layout and compare
    let grads: Vec<LstmComponentParams<f64>> = nodes_a
        .iter()
        .map(|n| LstmComponentParams {
            w_hi: tape_a.grad(n.w_hi).unwrap().clone(),
            w_hh: tape_a.grad(n.w_hh).unwrap().clone(),
            b_ih: tape_a.grad(n.b_ih).unwrap().clone(),
            b_hh: tape_a.grad(n.b_hh).unwrap().clone(),
        })
        .collect();
    let (g_hi, g_hh, g_bih, g_bhh) = embed_components_into_dense(&plan, &grads);

    let mut grad_max: f64 = 0.0;
    let pairs = [
        (&g_hi, tape_b.grad(dense.w_hi).unwrap()),
        (&g_hh, tape_b.grad(dense.w_hh).unwrap()),
        (&g_bih, tape_b.grad(dense.b_ih).unwrap()),
        (&g_bhh, tape_b.grad(dense.b_hh).unwrap()),
    ];
    for (packed, dense_g) in pairs {
        for (x, y) in packed.data().iter().zip(dense_g.data()) {
            grad_max = grad_max.max((x - y).abs());
        }
    }

    // structural zeros in the dense path stay exactly zero
    let (mask_hh, mask_hi) = expand_plan_to_masks::<f64>(&plan);
    let mask_hi = replicate_gate_rows(&mask_hi);
    let mask_hh = replicate_gate_rows(&mask_hh);
    let dg_hi = tape_b.grad(dense.w_hi).unwrap();
    let dg_hh = tape_b.grad(dense.w_hh).unwrap();
    for (m, g) in mask_hi.data().iter().zip(dg_hi.data()) {
        if *m == 0.0 {
            assert_eq!(*g, 0.0, "masked input weight leaked gradient");
        }
    }
    for (m, g) in mask_hh.data().iter().zip(dg_hh.data()) {
        if *m == 0.0 {
            assert_eq!(*g, 0.0, "masked recurrent weight leaked gradient");
        }
    }

    Trial { fwd_max, grad_max }
}

#[test]
fn components_match_masked_dense_over_many_shapes() {
    let mut worst_fwd: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for seed in 0..25 {
        let trial = run_equivalence_trial(seed);
        worst_fwd = worst_fwd.max(trial.fwd_max);
        worst_grad = worst_grad.max(trial.grad_max);
    }
    assert!(worst_fwd < 1e-10, "forward mismatch {worst_fwd:.3e}");
    assert!(worst_grad < 1e-8, "gradient mismatch {worst_grad:.3e}");
}
