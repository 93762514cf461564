//! Central-difference checks for every differentiable op and for composed
//! recurrent graphs. Each case rebuilds the graph as a pure function of one
//! parameter tensor and compares analytic against numeric gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseq_core::autodiff::NodeId;
use sparseq_core::gradcheck::{central_difference, max_rel_err};
use sparseq_core::plan::{plan_recurrent_layer, RecurrentSparsityPlan};
use sparseq_core::recurrent::{
    bilstm_forward, lstm_stack_forward, sparse_lstm_forward, LstmComponentNodes,
};
use sparseq_core::{Tape64, Tensor64};

fn check_gradients(
    seed: u64,
    shapes: &[[usize; 2]],
    tol: f64,
    build: impl Fn(&mut Tape64, &[NodeId]) -> NodeId,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inits: Vec<Tensor64> =
        shapes.iter().map(|&[r, c]| Tensor64::uniform(r, c, -0.8, 0.8, &mut rng)).collect();

    let mut tape = Tape64::new();
    let ids: Vec<NodeId> = inits.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.value(loss).shape(), [1, 1], "loss must be scalar");
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor64> =
        ids.iter().map(|&id| tape.grad(id).expect("leaf needs a gradient").clone()).collect();

    for (pi, init) in inits.iter().enumerate() {
        let numeric = central_difference(
            |x: &[f64]| {
                let mut vals = inits.clone();
                vals[pi] = Tensor64::from_vec(init.rows(), init.cols(), x.to_vec());
                let mut t = Tape64::new();
                let ids: Vec<NodeId> = vals.into_iter().map(|v| t.leaf(v)).collect();
                let l = build(&mut t, &ids);
                t.value(l).scalar()
            },
            init.data(),
            1e-5,
        );
        let err = max_rel_err(analytic[pi].data(), &numeric);
        assert!(err < tol, "param {pi}: max rel err {err:.3e} >= {tol:.0e}");
    }
}

const TOL: f64 = 1e-6;

#[test]
fn add_mul_and_activations() {
    check_gradients(1, &[[3, 4], [3, 4]], TOL, |t, p| {
        let s = t.sigmoid(p[0]);
        let h = t.tanh(p[1]);
        let m = t.mul(s, h).unwrap();
        let a = t.add(m, p[0]).unwrap();
        t.sum(a)
    });
}

#[test]
fn row_broadcast_add() {
    check_gradients(2, &[[4, 5], [1, 5]], TOL, |t, p| {
        let z = t.add_row(p[0], p[1]).unwrap();
        let z = t.tanh(z);
        t.sum(z)
    });
}

#[test]
fn matmul_both_orientations() {
    check_gradients(3, &[[3, 4], [4, 5], [2, 4]], TOL, |t, p| {
        let ab = t.matmul(p[0], p[1]).unwrap();
        let s = t.sigmoid(ab);
        let l1 = t.sum(s);
        // c * a^T exercises the transposed-right product
        let ca = t.matmul_tb(p[2], p[0]).unwrap();
        let ca = t.tanh(ca);
        let l2 = t.sum(ca);
        t.add(l1, l2).unwrap()
    });
}

#[test]
fn slices_and_concats() {
    check_gradients(4, &[[4, 6], [2, 6]], TOL, |t, p| {
        let left = t.slice_cols(p[0], 0, 2).unwrap();
        let right = t.slice_cols(p[0], 2, 6).unwrap();
        let top = t.slice_rows(p[0], 0, 2).unwrap();
        let glued = t.concat_cols(&[right, left]).unwrap();
        let stacked = t.concat_rows(&[top, p[1]]).unwrap();
        let a = t.tanh(glued);
        let b = t.sigmoid(stacked);
        let la = t.sum(a);
        let lb = t.sum(b);
        t.add(la, lb).unwrap()
    });
}

#[test]
fn fanout_reuses_accumulate() {
    check_gradients(5, &[[3, 3]], TOL, |t, p| {
        let s = t.sigmoid(p[0]);
        let a = t.mul(s, p[0]).unwrap();
        let b = t.add(s, p[0]).unwrap();
        let c = t.add(a, b).unwrap();
        t.sum(c)
    });
}

#[test]
fn embedding_gather() {
    check_gradients(6, &[[5, 3]], TOL, |t, p| {
        let e = t.embed(p[0], &[4, 0, 4, 2, 1, 4]).unwrap();
        let e = t.tanh(e);
        t.sum(e)
    });
}

#[test]
fn cross_entropy_unweighted() {
    check_gradients(7, &[[4, 6]], TOL, |t, p| {
        t.softmax_cross_entropy(p[0], &[1, 5, 0, 3], None).unwrap()
    });
}

#[test]
fn cross_entropy_weighted() {
    check_gradients(8, &[[4, 5]], TOL, |t, p| {
        t.softmax_cross_entropy(p[0], &[1, 4, 0, 3], Some(&[0.4, 0.0, 2.5, 1.0])).unwrap()
    });
}

#[test]
fn embedding_into_cross_entropy() {
    // lookup, projection, loss: the full input half of a language model
    check_gradients(9, &[[6, 3], [4, 3]], TOL, |t, p| {
        let e = t.embed(p[0], &[2, 5, 0]).unwrap();
        let logits = t.matmul_tb(e, p[1]).unwrap();
        t.softmax_cross_entropy(logits, &[1, 3, 0], None).unwrap()
    });
}

fn lstm_shapes(input: usize, out: usize) -> [[usize; 2]; 4] {
    [[4 * out, input], [4 * out, out], [1, 4 * out], [1, 4 * out]]
}

fn nodes_from(p: &[NodeId]) -> LstmComponentNodes {
    LstmComponentNodes { w_hi: p[0], w_hh: p[1], b_ih: p[2], b_hh: p[3] }
}

#[test]
fn single_lstm_step() {
    let mut shapes = vec![[2usize, 3usize]];
    shapes.extend(lstm_shapes(3, 4));
    check_gradients(10, &shapes, TOL, |t, p| {
        let nodes = nodes_from(&p[1..]);
        let plan = RecurrentSparsityPlan::dense(3, 4);
        let out = sparse_lstm_forward(t, &plan, &[nodes], p[0], 1, 2, None).unwrap();
        let h = out.outputs[0];
        let hh = t.mul(h, h).unwrap();
        t.sum(hh)
    });
}

#[test]
fn unrolled_lstm_five_steps() {
    let mut shapes = vec![[5 * 2, 3]];
    shapes.extend(lstm_shapes(3, 4));
    check_gradients(11, &shapes, TOL, |t, p| {
        let nodes = nodes_from(&p[1..]);
        let plan = RecurrentSparsityPlan::dense(3, 4);
        let out = sparse_lstm_forward(t, &plan, &[nodes], p[0], 5, 2, None).unwrap();
        let mut loss = t.sum(out.outputs[0]);
        for &h in &out.outputs[1..] {
            let hh = t.mul(h, h).unwrap();
            let s = t.sum(hh);
            loss = t.add(loss, s).unwrap();
        }
        loss
    });
}

#[test]
fn two_component_sparse_layer() {
    let plan = plan_recurrent_layer(6, 4, 2, 0.5, None).unwrap();
    let w = plan.components[0].input_width;
    let mut shapes = vec![[3 * 2, 6]];
    shapes.extend(lstm_shapes(w, 2));
    shapes.extend(lstm_shapes(plan.components[1].input_width, 2));
    check_gradients(12, &shapes, TOL, move |t, p| {
        let nodes = [nodes_from(&p[1..5]), nodes_from(&p[5..9])];
        let out = sparse_lstm_forward(t, &plan, &nodes, p[0], 3, 2, None).unwrap();
        let mut loss = None;
        for &h in &out.outputs {
            let hh = t.mul(h, h).unwrap();
            let s = t.sum(hh);
            loss = Some(match loss {
                None => s,
                Some(l) => t.add(l, s).unwrap(),
            });
        }
        loss.unwrap()
    });
}

#[test]
fn stacked_layers_with_cross_entropy() {
    let plan0 = plan_recurrent_layer(3, 4, 2, 1.0, None).unwrap();
    let plan1 = RecurrentSparsityPlan::dense(4, 3);
    let mut shapes = vec![[4 * 1, 3]];
    shapes.extend(lstm_shapes(3, 2));
    shapes.extend(lstm_shapes(3, 2));
    shapes.extend(lstm_shapes(4, 3));
    check_gradients(13, &shapes, TOL, move |t, p| {
        let l0 = [nodes_from(&p[1..5]), nodes_from(&p[5..9])];
        let l1 = [nodes_from(&p[9..13])];
        let fwd = lstm_stack_forward(
            t,
            &[(&plan0, &l0[..]), (&plan1, &l1[..])],
            p[0],
            4,
            1,
            None,
            None,
        )
        .unwrap();
        let logits = t.concat_rows(&fwd.outputs).unwrap();
        t.softmax_cross_entropy(logits, &[2, 0, 1, 2], None).unwrap()
    });
}

#[test]
fn bidirectional_layer() {
    let plan = RecurrentSparsityPlan::dense(3, 2);
    let mut shapes = vec![[3 * 2, 3]];
    shapes.extend(lstm_shapes(3, 2));
    shapes.extend(lstm_shapes(3, 2));
    check_gradients(14, &shapes, TOL, move |t, p| {
        let f = [nodes_from(&p[1..5])];
        let b = [nodes_from(&p[5..9])];
        let out = bilstm_forward(t, (&plan, &f[..]), (&plan, &b[..]), p[0], 3, 2).unwrap();
        let logits = t.concat_rows(&out.outputs).unwrap();
        t.softmax_cross_entropy(logits, &[0, 3, 1, 2, 3, 0], Some(&[1.0, 0.5, 1.0, 0.0, 2.0, 1.0]))
            .unwrap()
    });
}

#[test]
fn masked_embedding_keeps_structural_zeros_out_of_gradients() {
    // a zero mask position must produce exactly zero gradient, not merely small
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let table_init = Tensor64::uniform(4, 3, -0.5, 0.5, &mut rng);
    let mask = Tensor64::from_rows(&[
        vec![1.0, 1.0, 1.0],
        vec![1.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
    ]);
    let mut tape = Tape64::new();
    let table = tape.leaf(table_init);
    let mask_node = tape.constant(mask.clone());
    let masked = tape.mul(table, mask_node).unwrap();
    let e = tape.embed(masked, &[1, 2, 3, 1]).unwrap();
    let loss = tape.softmax_cross_entropy(e, &[0, 2, 1, 0], None).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(table).unwrap();
    for r in 0..4 {
        for c in 0..3 {
            if mask.at(r, c) == 0.0 {
                assert_eq!(g.at(r, c), 0.0, "masked entry ({r},{c}) leaked gradient");
            }
        }
    }
    // row 0 was never looked up
    assert!(g.row(0).iter().all(|&v| v == 0.0));
    assert!(g.row(1).iter().take(2).all(|&v| v != 0.0));
}
