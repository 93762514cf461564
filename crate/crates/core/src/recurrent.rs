//! LSTM cells and predefined-sparse recurrent layers, realized two ways:
//! as parallel dense components over input windows (the working
//! implementation) and as a masked dense cell (the equivalence reference).
//!
//! Stacked gate layout is (i, f, g, o); all sequence activations travel as
//! one (steps*batch) x width matrix with rows in step-major order.

use crate::autodiff::{NodeId, Tape, TapeError};
use crate::plan::{count_lstm_params, expand_plan_to_masks, RecurrentSparsityPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

pub const GATE_ORDER: &str = "ifgo";

/// Weights of one dense LSTM component, gates stacked along the rows.
#[derive(Clone, Debug)]
pub struct LstmComponentParams<F: Scalar> {
    /// 4*out x in_width
    pub w_hi: Tensor<F>,
    /// 4*out x out
    pub w_hh: Tensor<F>,
    /// 1 x 4*out
    pub b_ih: Tensor<F>,
    /// 1 x 4*out
    pub b_hh: Tensor<F>,
}

impl<F: Scalar> LstmComponentParams<F> {
    /// Uniform init at the component's own fan scale; biases start at zero
    /// (the forget gate included).
    pub fn init(input_width: usize, output_width: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (output_width as f64).sqrt();
        LstmComponentParams {
            w_hi: Tensor::uniform(4 * output_width, input_width, -bound, bound, rng),
            w_hh: Tensor::uniform(4 * output_width, output_width, -bound, bound, rng),
            b_ih: Tensor::zeros(1, 4 * output_width),
            b_hh: Tensor::zeros(1, 4 * output_width),
        }
    }

    pub fn zeros(input_width: usize, output_width: usize) -> Self {
        LstmComponentParams {
            w_hi: Tensor::zeros(4 * output_width, input_width),
            w_hh: Tensor::zeros(4 * output_width, output_width),
            b_ih: Tensor::zeros(1, 4 * output_width),
            b_hh: Tensor::zeros(1, 4 * output_width),
        }
    }

    pub fn output_width(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn param_count(&self) -> u64 {
        (self.w_hi.len() + self.w_hh.len() + self.b_ih.len() + self.b_hh.len()) as u64
    }
}

/// One sparse layer: a plan plus parameters for each of its components.
#[derive(Clone, Debug)]
pub struct SparseLstmLayer<F: Scalar> {
    pub plan: RecurrentSparsityPlan,
    pub components: Vec<LstmComponentParams<F>>,
}

impl<F: Scalar> SparseLstmLayer<F> {
    pub fn init(plan: RecurrentSparsityPlan, rng: &mut impl Rng) -> Self {
        let components = plan
            .components
            .iter()
            .map(|c| LstmComponentParams::init(c.input_width, c.output_width, rng))
            .collect();
        SparseLstmLayer { plan, components }
    }

    pub fn param_count(&self) -> u64 {
        self.components.iter().map(|c| c.param_count()).sum()
    }
}

/// Tape handles for one component's weights. Swap `w_hh` for a masked node
/// to apply weight drop.
#[derive(Clone, Copy, Debug)]
pub struct LstmComponentNodes {
    pub w_hi: NodeId,
    pub w_hh: NodeId,
    pub b_ih: NodeId,
    pub b_hh: NodeId,
}

pub fn register_component<F: Scalar>(
    tape: &mut Tape<F>,
    params: &LstmComponentParams<F>,
) -> LstmComponentNodes {
    LstmComponentNodes {
        w_hi: tape.leaf(params.w_hi.clone()),
        w_hh: tape.leaf(params.w_hh.clone()),
        b_ih: tape.leaf(params.b_ih.clone()),
        b_hh: tape.leaf(params.b_hh.clone()),
    }
}

pub fn register_layer<F: Scalar>(
    tape: &mut Tape<F>,
    layer: &SparseLstmLayer<F>,
) -> Vec<LstmComponentNodes> {
    layer.components.iter().map(|c| register_component(tape, c)).collect()
}

/// Detached recurrent state of one component.
#[derive(Clone, Debug)]
pub struct LstmState<F: Scalar> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(batch: usize, output_width: usize) -> Self {
        LstmState { h: Tensor::zeros(batch, output_width), c: Tensor::zeros(batch, output_width) }
    }
}

/// Gate block boundaries never change: i, f, g, o each of width `out`.
fn step_pre<F: Scalar>(
    tape: &mut Tape<F>,
    nodes: &LstmComponentNodes,
    out: usize,
    pre_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId), TapeError> {
    let rec = tape.matmul_tb(h_prev, nodes.w_hh)?;
    let z = tape.add(pre_t, rec)?;
    let z = tape.add_row(z, nodes.b_ih)?;
    let z = tape.add_row(z, nodes.b_hh)?;
    let zi = tape.slice_cols(z, 0, out)?;
    let zf = tape.slice_cols(z, out, 2 * out)?;
    let zg = tape.slice_cols(z, 2 * out, 3 * out)?;
    let zo = tape.slice_cols(z, 3 * out, 4 * out)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One LSTM step of a single component on an input slice.
pub fn lstm_step<F: Scalar>(
    tape: &mut Tape<F>,
    nodes: &LstmComponentNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId), TapeError> {
    let out = tape.value(nodes.w_hh).cols();
    let pre = tape.matmul_tb(x, nodes.w_hi)?;
    step_pre(tape, nodes, out, pre, h_prev, c_prev)
}

/// Output of a layer run over a sequence segment.
pub struct LayerForward<F: Scalar> {
    /// Hidden state per step, each batch x hidden (components concatenated
    /// in plan order).
    pub outputs: Vec<NodeId>,
    /// Detached per-component state after the last step.
    pub final_states: Vec<LstmState<F>>,
}

/// Runs each component's dense LSTM over its input window and concatenates
/// the per-step hidden states in plan order.
///
/// `x_all` holds the whole segment: (steps*batch) x input, step-major. The
/// input-side gate contributions are computed in one matrix product per
/// component, then steps recur over the hidden state only.
pub fn sparse_lstm_forward<F: Scalar>(
    tape: &mut Tape<F>,
    plan: &RecurrentSparsityPlan,
    components: &[LstmComponentNodes],
    x_all: NodeId,
    steps: usize,
    batch: usize,
    init: Option<&[LstmState<F>]>,
) -> Result<LayerForward<F>, TapeError> {
    assert_eq!(components.len(), plan.components.len(), "one params set per component");
    let x_shape = tape.value(x_all).shape();
    if x_shape != [steps * batch, plan.input_size] {
        return Err(TapeError::ShapeMismatch {
            op: "sparse_lstm_forward",
            lhs: x_shape,
            rhs: [steps * batch, plan.input_size],
        });
    }
    if let Some(states) = init {
        assert_eq!(states.len(), components.len(), "one init state per component");
    }
    let mut per_component: Vec<Vec<NodeId>> = Vec::with_capacity(components.len());
    let mut final_states = Vec::with_capacity(components.len());
    for (spec, nodes) in plan.components.iter().zip(components) {
        let out = spec.output_width;
        let xc = if spec.input_offset == 0 && spec.input_width == plan.input_size {
            x_all
        } else {
            tape.slice_cols(x_all, spec.input_offset, spec.input_offset + spec.input_width)?
        };
        let pre = tape.matmul_tb(xc, nodes.w_hi)?;
        let idx = per_component.len();
        let (mut h, mut c) = match init {
            Some(states) => {
                (tape.constant(states[idx].h.clone()), tape.constant(states[idx].c.clone()))
            }
            None => {
                let z = LstmState::zeros(batch, out);
                (tape.constant(z.h), tape.constant(z.c))
            }
        };
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let pre_t = tape.slice_rows(pre, t * batch, (t + 1) * batch)?;
            let (nh, nc) = step_pre(tape, nodes, out, pre_t, h, c)?;
            h = nh;
            c = nc;
            hs.push(h);
        }
        final_states.push(LstmState { h: tape.detach(h), c: tape.detach(c) });
        per_component.push(hs);
    }
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        if components.len() == 1 {
            outputs.push(per_component[0][t]);
        } else {
            let parts: Vec<NodeId> = per_component.iter().map(|hs| hs[t]).collect();
            outputs.push(tape.concat_cols(&parts)?);
        }
    }
    Ok(LayerForward { outputs, final_states })
}

/// Dense weight set covering a whole layer, gates stacked along the rows.
#[derive(Clone, Copy, Debug)]
pub struct DenseLstmNodes {
    pub w_hi: NodeId,
    pub w_hh: NodeId,
    pub b_ih: NodeId,
    pub b_hh: NodeId,
}

/// Reference path: one dense LSTM whose weights are multiplied by the plan's
/// structural masks (replicated across the four gate blocks).
pub fn masked_dense_forward<F: Scalar>(
    tape: &mut Tape<F>,
    plan: &RecurrentSparsityPlan,
    dense: DenseLstmNodes,
    x_all: NodeId,
    steps: usize,
    batch: usize,
    init: Option<&LstmState<F>>,
) -> Result<LayerForward<F>, TapeError> {
    let h = plan.hidden_size;
    let i = plan.input_size;
    let w_hi_shape = tape.value(dense.w_hi).shape();
    let w_hh_shape = tape.value(dense.w_hh).shape();
    if w_hi_shape != [4 * h, i] || w_hh_shape != [4 * h, h] {
        return Err(TapeError::ShapeMismatch {
            op: "masked_dense_forward",
            lhs: w_hi_shape,
            rhs: w_hh_shape,
        });
    }
    let (mask_hh, mask_hi) = expand_plan_to_masks::<F>(plan);
    let mask_hi_rep = tape.constant(replicate_gate_rows(&mask_hi));
    let mask_hh_rep = tape.constant(replicate_gate_rows(&mask_hh));
    let w_hi = tape.mul(dense.w_hi, mask_hi_rep)?;
    let w_hh = tape.mul(dense.w_hh, mask_hh_rep)?;
    let nodes = LstmComponentNodes { w_hi, w_hh, b_ih: dense.b_ih, b_hh: dense.b_hh };
    let dense_plan = RecurrentSparsityPlan::dense(i, h);
    let init_vec = init.map(|s| vec![s.clone()]);
    sparse_lstm_forward(tape, &dense_plan, &[nodes], x_all, steps, batch, init_vec.as_deref())
}

/// Stacks a mask vertically four times, matching the gate row layout.
pub fn replicate_gate_rows<F: Scalar>(mask: &Tensor<F>) -> Tensor<F> {
    let mut data = Vec::with_capacity(4 * mask.len());
    for _ in 0..4 {
        data.extend_from_slice(mask.data());
    }
    Tensor::from_vec(4 * mask.rows(), mask.cols(), data)
}

/// Packs component weights into the dense layout (zeros elsewhere), for
/// comparing the two forward implementations.
pub fn embed_components_into_dense<F: Scalar>(
    plan: &RecurrentSparsityPlan,
    components: &[LstmComponentParams<F>],
) -> (Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>) {
    let h = plan.hidden_size;
    let i = plan.input_size;
    let mut w_hi = Tensor::zeros(4 * h, i);
    let mut w_hh = Tensor::zeros(4 * h, h);
    let mut b_ih = Tensor::zeros(1, 4 * h);
    let mut b_hh = Tensor::zeros(1, 4 * h);
    let mut row0 = 0;
    for (spec, comp) in plan.components.iter().zip(components) {
        let out = spec.output_width;
        for gate in 0..4 {
            for r in 0..out {
                let dense_r = gate * h + row0 + r;
                let comp_r = gate * out + r;
                w_hi.row_mut(dense_r)[spec.input_offset..spec.input_offset + spec.input_width]
                    .copy_from_slice(comp.w_hi.row(comp_r));
                w_hh.row_mut(dense_r)[row0..row0 + out].copy_from_slice(comp.w_hh.row(comp_r));
                b_ih.row_mut(0)[dense_r] = comp.b_ih.row(0)[comp_r];
                b_hh.row_mut(0)[dense_r] = comp.b_hh.row(0)[comp_r];
            }
        }
        row0 += out;
    }
    (w_hi, w_hh, b_ih, b_hh)
}

/// Per-layer output hook, e.g. variational dropout between layers.
pub type BetweenLayerHook<'a, F> =
    &'a mut dyn FnMut(&mut Tape<F>, usize, NodeId) -> Result<NodeId, TapeError>;

pub struct StackForward<F: Scalar> {
    /// Last layer's hidden state per step.
    pub outputs: Vec<NodeId>,
    /// Detached final states, outer index = layer.
    pub final_states: Vec<Vec<LstmState<F>>>,
}

/// Feeds each layer's concatenated output to the next layer.
pub fn lstm_stack_forward<F: Scalar>(
    tape: &mut Tape<F>,
    layers: &[(&RecurrentSparsityPlan, &[LstmComponentNodes])],
    x_all: NodeId,
    steps: usize,
    batch: usize,
    init: Option<&[Vec<LstmState<F>>]>,
    mut between: Option<BetweenLayerHook<'_, F>>,
) -> Result<StackForward<F>, TapeError> {
    assert!(!layers.is_empty(), "stack needs at least one layer");
    if let Some(states) = init {
        assert_eq!(states.len(), layers.len(), "one init state list per layer");
    }
    let mut x = x_all;
    let mut final_states = Vec::with_capacity(layers.len());
    let mut outputs = Vec::new();
    for (li, (plan, nodes)) in layers.iter().enumerate() {
        let layer_init = init.map(|s| s[li].as_slice());
        let fwd = sparse_lstm_forward(tape, plan, nodes, x, steps, batch, layer_init)?;
        final_states.push(fwd.final_states);
        if li + 1 < layers.len() {
            x = tape.concat_rows(&fwd.outputs)?;
            if let Some(hook) = between.as_mut() {
                x = hook(tape, li, x)?;
            }
        } else {
            outputs = fwd.outputs;
        }
    }
    Ok(StackForward { outputs, final_states })
}

pub struct BiLstmForward<F: Scalar> {
    /// Per step, batch x (h_fwd + h_bwd).
    pub outputs: Vec<NodeId>,
    pub final_fwd: Vec<LstmState<F>>,
    pub final_bwd: Vec<LstmState<F>>,
}

/// Runs one layer forward in time and another backward, concatenating the
/// two hidden states at each step.
pub fn bilstm_forward<F: Scalar>(
    tape: &mut Tape<F>,
    fwd: (&RecurrentSparsityPlan, &[LstmComponentNodes]),
    bwd: (&RecurrentSparsityPlan, &[LstmComponentNodes]),
    x_all: NodeId,
    steps: usize,
    batch: usize,
) -> Result<BiLstmForward<F>, TapeError> {
    let x_rev = reverse_steps(tape, x_all, steps, batch)?;
    let f = sparse_lstm_forward(tape, fwd.0, fwd.1, x_all, steps, batch, None)?;
    let b = sparse_lstm_forward(tape, bwd.0, bwd.1, x_rev, steps, batch, None)?;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        outputs.push(tape.concat_cols(&[f.outputs[t], b.outputs[steps - 1 - t]])?);
    }
    Ok(BiLstmForward { outputs, final_fwd: f.final_states, final_bwd: b.final_states })
}

/// Reverses the step-major block order of a sequence matrix.
pub fn reverse_steps<F: Scalar>(
    tape: &mut Tape<F>,
    x_all: NodeId,
    steps: usize,
    batch: usize,
) -> Result<NodeId, TapeError> {
    if steps == 1 {
        return Ok(x_all);
    }
    let mut blocks = Vec::with_capacity(steps);
    for t in (0..steps).rev() {
        blocks.push(tape.slice_rows(x_all, t * batch, (t + 1) * batch)?);
    }
    tape.concat_rows(&blocks)
}

/// Layer parameter count equals the plan formula exactly.
pub fn layer_param_count<F: Scalar>(layer: &SparseLstmLayer<F>) -> u64 {
    let by_shapes = layer.param_count();
    debug_assert_eq!(by_shapes, count_lstm_params(&layer.plan));
    by_shapes
}
