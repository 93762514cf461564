//! Model assembly: sparse embedding, stacked [sparse] LSTMs, decoder.

use rand::Rng;

use sparseq_core::autodiff::{NodeId, TapeError};
use sparseq_core::checkpoint::{Checkpoint, CheckpointError};
use sparseq_core::corpus::{TagSet, Vocabulary};
use sparseq_core::embedding::{
    allocate_lengths, solve_alpha, uniform_bins, EmbedError, EmbeddingAllocation,
    SparseEmbeddingParams,
};
use sparseq_core::plan::{
    count_lstm_params, plan_recurrent_layer, solve_gamma_for_equal_params, PlanError,
    RecurrentSparsityPlan,
};
use sparseq_core::recurrent::{
    bilstm_forward, lstm_stack_forward, register_component, LstmComponentNodes,
    LstmComponentParams, LstmState, SparseLstmLayer, StackForward,
};
use sparseq_core::regularization::variational_dropout_mask;
use sparseq_core::{Tape64, Tensor64};

use crate::config::{ExperimentConfig, GammaSpec};

pub const POS_HIDDEN: usize = 10;
pub const POS_PROJ: usize = 10;
/// Unit-scale rows keep first-layer activations from starting near zero;
/// corpora without a strong unigram skew give SGD no other warmup signal.
const EMBED_INIT_SCALE: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("sparsity planning failed: {0}")]
    Plan(#[from] PlanError),
    #[error("embedding allocation failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Invalid(String),
    #[error("graph construction failed: {0}")]
    Tape(#[from] TapeError),
}

/// Window plans for every LSTM layer of an lm/recite stack, in order.
/// Layer widths run embedding -> hidden sizes -> embedding, so a tied
/// decoder lines up with the last hidden state.
pub fn plan_lm_layers(
    cfg: &ExperimentConfig,
) -> Result<Vec<RecurrentSparsityPlan>, ModelError> {
    let k = cfg.embedding_size;
    let mut widths = vec![k];
    widths.extend_from_slice(&cfg.hidden_sizes);
    widths.push(k);

    let dense_widths: Option<Vec<usize>> = match cfg.gamma {
        GammaSpec::MatchBudget => {
            let h_d = cfg.match_dense_hidden.ok_or_else(|| {
                ModelError::Invalid(
                    "gamma = match-budget needs `match dense hidden`".to_string(),
                )
            })?;
            let k_d = cfg.match_dense_embedding.unwrap_or(k);
            let mut w = vec![k_d];
            w.extend(std::iter::repeat(h_d).take(cfg.hidden_sizes.len()));
            w.push(k_d);
            Some(w)
        }
        GammaSpec::PerLayer(_) => None,
    };

    let mut plans = Vec::with_capacity(widths.len() - 1);
    for layer in 0..widths.len() - 1 {
        let (i_s, h_s) = (widths[layer], widths[layer + 1]);
        let n = cfg.segments_for_layer(layer);
        let gamma = match &cfg.gamma {
            GammaSpec::MatchBudget => {
                let dw = dense_widths.as_ref().expect("set for match-budget");
                solve_gamma_for_equal_params(dw[layer], dw[layer + 1], i_s, h_s, n)?
            }
            GammaSpec::PerLayer(gs) => gs.get(layer).copied().unwrap_or(1.0),
        };
        plans.push(plan_recurrent_layer(i_s, h_s, n, gamma, None)?);
    }
    Ok(plans)
}

pub fn allocate_embedding(
    cfg: &ExperimentConfig,
    vocab_size: usize,
) -> Result<EmbeddingAllocation, ModelError> {
    let k = cfg.embedding_size;
    if cfg.embedding_density >= 1.0 {
        return Ok(EmbeddingAllocation::dense(vocab_size, k));
    }
    let bins = uniform_bins(k, cfg.embedding_bins.unwrap_or(k));
    let alpha = solve_alpha(k, cfg.embedding_density, &bins)?;
    Ok(allocate_lengths(vocab_size, k, alpha, &bins)?)
}

fn zero_embedding(allocation: EmbeddingAllocation) -> SparseEmbeddingParams<f64> {
    let v = allocation.vocab_size;
    let k = allocation.max_len;
    SparseEmbeddingParams {
        table: Tensor64::zeros(v, k),
        lengths_by_id: allocation.lengths.clone(),
        allocation,
    }
}

fn zero_layer(plan: RecurrentSparsityPlan) -> SparseLstmLayer<f64> {
    let components = plan
        .components
        .iter()
        .map(|c| LstmComponentParams::zeros(c.input_width, c.output_width))
        .collect();
    SparseLstmLayer { plan, components }
}

pub struct LmModel {
    pub embed: SparseEmbeddingParams<f64>,
    pub layers: Vec<SparseLstmLayer<f64>>,
    /// None when tied to the embedding table.
    pub decoder: Option<Tensor64>,
    pub out_bias: Tensor64,
    structural_mask: Option<Tensor64>,
}

impl LmModel {
    pub fn build(
        cfg: &ExperimentConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<LmModel, ModelError> {
        let plans = plan_lm_layers(cfg)?;
        let allocation = allocate_embedding(cfg, vocab_size)?;
        let embed = SparseEmbeddingParams::init(allocation, EMBED_INIT_SCALE, rng);
        let layers = plans
            .into_iter()
            .map(|p| SparseLstmLayer::init(p, rng))
            .collect();
        let decoder = if cfg.tie_weights {
            None
        } else {
            Some(Tensor64::uniform(
                vocab_size,
                cfg.embedding_size,
                -EMBED_INIT_SCALE,
                EMBED_INIT_SCALE,
                rng,
            ))
        };
        Ok(Self::assemble(embed, layers, decoder, vocab_size))
    }

    /// Shapes only, zero values: enough for exact parameter censuses
    /// without paying for initialization.
    pub fn build_for_count(
        cfg: &ExperimentConfig,
        vocab_size: usize,
    ) -> Result<LmModel, ModelError> {
        let plans = plan_lm_layers(cfg)?;
        let embed = zero_embedding(allocate_embedding(cfg, vocab_size)?);
        let layers = plans.into_iter().map(zero_layer).collect();
        let decoder = if cfg.tie_weights {
            None
        } else {
            Some(Tensor64::zeros(vocab_size, cfg.embedding_size))
        };
        Ok(Self::assemble(embed, layers, decoder, vocab_size))
    }

    fn assemble(
        embed: SparseEmbeddingParams<f64>,
        layers: Vec<SparseLstmLayer<f64>>,
        decoder: Option<Tensor64>,
        vocab_size: usize,
    ) -> LmModel {
        let k = embed.table.cols();
        let dense_rows = embed.lengths_by_id.iter().all(|&l| l == k);
        let structural_mask = if dense_rows { None } else { Some(embed.structural_mask()) };
        LmModel {
            embed,
            layers,
            decoder,
            out_bias: Tensor64::zeros(1, vocab_size),
            structural_mask,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.vocab_size()
    }

    /// Named parameter tensors in registration order. The embedding row
    /// counts trainable prefixes only, so the total matches the layout
    /// formulas exactly.
    pub fn param_table(&self) -> Vec<(String, u64)> {
        let mut out = vec![("embedding".to_string(), self.embed.param_count())];
        for (li, layer) in self.layers.iter().enumerate() {
            for (ci, comp) in layer.components.iter().enumerate() {
                out.push((format!("layer{li}.comp{ci}"), comp.param_count()));
            }
        }
        if let Some(dec) = &self.decoder {
            out.push(("decoder.weight".to_string(), dec.len() as u64));
        }
        out.push(("decoder.bias".to_string(), self.out_bias.len() as u64));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.param_table().iter().map(|(_, n)| n).sum()
    }

    /// Mutable views over every trainable tensor, matching the leaf order
    /// produced by [`register_lm`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor64> {
        let mut out: Vec<&mut Tensor64> = vec![&mut self.embed.table];
        for layer in &mut self.layers {
            for comp in &mut layer.components {
                out.push(&mut comp.w_hi);
                out.push(&mut comp.w_hh);
                out.push(&mut comp.b_ih);
                out.push(&mut comp.b_hh);
            }
        }
        if let Some(dec) = &mut self.decoder {
            out.push(dec);
        }
        out.push(&mut self.out_bias);
        out
    }

    pub fn params(&self) -> Vec<&Tensor64> {
        let mut out: Vec<&Tensor64> = vec![&self.embed.table];
        for layer in &self.layers {
            for comp in &layer.components {
                out.push(&comp.w_hi);
                out.push(&comp.w_hh);
                out.push(&comp.b_ih);
                out.push(&comp.b_hh);
            }
        }
        if let Some(dec) = &self.decoder {
            out.push(dec);
        }
        out.push(&self.out_bias);
        out
    }

    pub fn zero_states(&self, batch: usize) -> Vec<Vec<LstmState<f64>>> {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .plan
                    .components
                    .iter()
                    .map(|c| LstmState::zeros(batch, c.output_width))
                    .collect()
            })
            .collect()
    }
}

/// Per-batch dropout configuration; all zero means evaluation mode.
#[derive(Clone, Copy, Default)]
pub struct DropoutSpec {
    pub word: f64,
    pub variational: f64,
    pub dropconnect: f64,
}

impl DropoutSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        DropoutSpec {
            word: cfg.word_dropout,
            variational: cfg.variational_dropout,
            dropconnect: cfg.weight_dropconnect,
        }
    }

    pub fn off() -> Self {
        Self::default()
    }
}

pub struct LmNodes {
    /// Raw leaves in [`LmModel::params_mut`] order.
    pub leaves: Vec<NodeId>,
    /// Embedding table after structural masking (equals the raw leaf when
    /// every row is full length).
    pub masked_table: NodeId,
    pub layers: Vec<Vec<LstmComponentNodes>>,
    pub decoder: Option<NodeId>,
    pub out_bias: NodeId,
}

fn masked_component(
    tape: &mut Tape64,
    comp: &LstmComponentParams<f64>,
    dropconnect: f64,
    rng: &mut impl Rng,
) -> Result<(LstmComponentNodes, [NodeId; 4]), ModelError> {
    let raw = register_component(tape, comp);
    let leaves = [raw.w_hi, raw.w_hh, raw.b_ih, raw.b_hh];
    let mut nodes = raw;
    if dropconnect > 0.0 {
        let mask = variational_dropout_mask::<f64>(
            comp.w_hh.rows(),
            comp.w_hh.cols(),
            dropconnect,
            rng,
        );
        let mask = tape.constant(mask);
        nodes.w_hh = tape.mul(nodes.w_hh, mask)?;
    }
    Ok((nodes, leaves))
}

/// Registers every trainable tensor on the tape. DropConnect masks are
/// sampled here (one per batch) so gradients reach the raw weights scaled
/// the same way the forward pass was.
pub fn register_lm(
    tape: &mut Tape64,
    model: &LmModel,
    dropconnect: f64,
    rng: &mut impl Rng,
) -> Result<LmNodes, ModelError> {
    let table = tape.leaf(model.embed.table.clone());
    let mut leaves = vec![table];
    let masked_table = match &model.structural_mask {
        Some(mask) => {
            let m = tape.constant(mask.clone());
            tape.mul(table, m)?
        }
        None => table,
    };
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut nodes = Vec::with_capacity(layer.components.len());
        for comp in &layer.components {
            let (n, ls) = masked_component(tape, comp, dropconnect, rng)?;
            leaves.extend_from_slice(&ls);
            nodes.push(n);
        }
        layers.push(nodes);
    }
    let decoder = match &model.decoder {
        Some(dec) => {
            let d = tape.leaf(dec.clone());
            leaves.push(d);
            Some(d)
        }
        None => None,
    };
    let out_bias = tape.leaf(model.out_bias.clone());
    leaves.push(out_bias);
    Ok(LmNodes { leaves, masked_table, layers, decoder, out_bias })
}

/// Word-level and variational dropout folded into one constant row mask
/// for the gathered embedding rows. Returns None in evaluation mode.
pub fn embedding_dropout_mask(
    ids: &[usize],
    steps: usize,
    batch: usize,
    k: usize,
    spec: DropoutSpec,
    rng: &mut impl Rng,
) -> Option<Tensor64> {
    if spec.word <= 0.0 && spec.variational <= 0.0 {
        return None;
    }
    let word_scales =
        sparseq_core::regularization::word_embedding_dropout::<f64>(ids, spec.word, rng);
    let var = if spec.variational > 0.0 {
        Some(variational_dropout_mask::<f64>(batch, k, spec.variational, rng))
    } else {
        None
    };
    let mut mask = Tensor64::filled(ids.len(), k, 1.0);
    for (r, &id) in ids.iter().enumerate() {
        let w = word_scales.get(&id).copied().unwrap_or(1.0);
        let b = r % batch;
        debug_assert!(r / batch < steps);
        for j in 0..k {
            let v = var.as_ref().map_or(1.0, |m| m.at(b, j));
            mask.set(r, j, w * v);
        }
    }
    Some(mask)
}

pub struct LmForward {
    pub loss: NodeId,
    pub logits: NodeId,
    pub final_states: Vec<Vec<LstmState<f64>>>,
}

/// Embedding lookup, stack, decoder, and mean cross entropy for one
/// step-major segment.
#[allow(clippy::too_many_arguments)]
pub fn lm_forward(
    tape: &mut Tape64,
    model: &LmModel,
    nodes: &LmNodes,
    inputs: &[usize],
    targets: &[usize],
    steps: usize,
    batch: usize,
    init: Option<&[Vec<LstmState<f64>>]>,
    dropout: DropoutSpec,
    rng: &mut impl Rng,
) -> Result<LmForward, ModelError> {
    let k = model.embed.table.cols();
    let mut x = tape.embed(nodes.masked_table, inputs)?;
    if let Some(mask) = embedding_dropout_mask(inputs, steps, batch, k, dropout, rng) {
        let m = tape.constant(mask);
        x = tape.mul(x, m)?;
    }
    let layer_refs: Vec<(&RecurrentSparsityPlan, &[LstmComponentNodes])> = model
        .layers
        .iter()
        .zip(&nodes.layers)
        .map(|(layer, n)| (&layer.plan, n.as_slice()))
        .collect();
    let StackForward { outputs, final_states } =
        lstm_stack_forward(tape, &layer_refs, x, steps, batch, init, None)?;
    let out = tape.concat_rows(&outputs)?;
    let weight = match nodes.decoder {
        Some(d) => d,
        None => nodes.masked_table,
    };
    let mut logits = tape.matmul_tb(out, weight)?;
    logits = tape.add_row(logits, nodes.out_bias)?;
    let loss = tape.softmax_cross_entropy(logits, targets, None)?;
    Ok(LmForward { loss, logits, final_states })
}

pub struct PosModel {
    pub embed: SparseEmbeddingParams<f64>,
    pub fwd: SparseLstmLayer<f64>,
    pub bwd: SparseLstmLayer<f64>,
    pub w_proj: Tensor64,
    pub b_proj: Tensor64,
    pub w_out: Tensor64,
    pub b_out: Tensor64,
    structural_mask: Option<Tensor64>,
}

impl PosModel {
    pub fn build(
        cfg: &ExperimentConfig,
        vocab_size: usize,
        tagset_size: usize,
        rng: &mut impl Rng,
    ) -> Result<PosModel, ModelError> {
        if tagset_size == 0 {
            return Err(ModelError::Invalid("empty tag inventory".to_string()));
        }
        let k = cfg.embedding_size;
        let allocation = allocate_embedding(cfg, vocab_size)?;
        let embed = SparseEmbeddingParams::init(allocation, EMBED_INIT_SCALE, rng);
        let plan = RecurrentSparsityPlan::dense(k, POS_HIDDEN);
        let fwd = SparseLstmLayer::init(plan.clone(), rng);
        let bwd = SparseLstmLayer::init(plan, rng);
        let proj_in = 2 * POS_HIDDEN;
        let sp = 1.0 / (proj_in as f64).sqrt();
        let so = 1.0 / (POS_PROJ as f64).sqrt();
        Ok(Self::assemble(
            embed,
            fwd,
            bwd,
            Tensor64::uniform(POS_PROJ, proj_in, -sp, sp, rng),
            Tensor64::uniform(tagset_size, POS_PROJ, -so, so, rng),
            tagset_size,
        ))
    }

    pub fn build_for_count(
        cfg: &ExperimentConfig,
        vocab_size: usize,
        tagset_size: usize,
    ) -> Result<PosModel, ModelError> {
        if tagset_size == 0 {
            return Err(ModelError::Invalid("empty tag inventory".to_string()));
        }
        let k = cfg.embedding_size;
        let embed = zero_embedding(allocate_embedding(cfg, vocab_size)?);
        let plan = RecurrentSparsityPlan::dense(k, POS_HIDDEN);
        Ok(Self::assemble(
            embed,
            zero_layer(plan.clone()),
            zero_layer(plan),
            Tensor64::zeros(POS_PROJ, 2 * POS_HIDDEN),
            Tensor64::zeros(tagset_size, POS_PROJ),
            tagset_size,
        ))
    }

    fn assemble(
        embed: SparseEmbeddingParams<f64>,
        fwd: SparseLstmLayer<f64>,
        bwd: SparseLstmLayer<f64>,
        w_proj: Tensor64,
        w_out: Tensor64,
        tagset_size: usize,
    ) -> PosModel {
        let k = embed.table.cols();
        let dense_rows = embed.lengths_by_id.iter().all(|&l| l == k);
        let structural_mask = if dense_rows { None } else { Some(embed.structural_mask()) };
        PosModel {
            embed,
            fwd,
            bwd,
            w_proj,
            b_proj: Tensor64::zeros(1, POS_PROJ),
            w_out,
            b_out: Tensor64::zeros(1, tagset_size),
            structural_mask,
        }
    }

    pub fn tagset_size(&self) -> usize {
        self.b_out.cols()
    }

    pub fn param_table(&self) -> Vec<(String, u64)> {
        let mut out = vec![("embedding".to_string(), self.embed.param_count())];
        for (name, layer) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            for (ci, comp) in layer.components.iter().enumerate() {
                out.push((format!("{name}.comp{ci}"), comp.param_count()));
            }
        }
        out.push(("proj.weight".to_string(), self.w_proj.len() as u64));
        out.push(("proj.bias".to_string(), self.b_proj.len() as u64));
        out.push(("out.weight".to_string(), self.w_out.len() as u64));
        out.push(("out.bias".to_string(), self.b_out.len() as u64));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.param_table().iter().map(|(_, n)| n).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor64> {
        let mut out: Vec<&mut Tensor64> = vec![&mut self.embed.table];
        for layer in [&mut self.fwd, &mut self.bwd] {
            for comp in &mut layer.components {
                out.push(&mut comp.w_hi);
                out.push(&mut comp.w_hh);
                out.push(&mut comp.b_ih);
                out.push(&mut comp.b_hh);
            }
        }
        out.push(&mut self.w_proj);
        out.push(&mut self.b_proj);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn params(&self) -> Vec<&Tensor64> {
        let mut out: Vec<&Tensor64> = vec![&self.embed.table];
        for layer in [&self.fwd, &self.bwd] {
            for comp in &layer.components {
                out.push(&comp.w_hi);
                out.push(&comp.w_hh);
                out.push(&comp.b_ih);
                out.push(&comp.b_hh);
            }
        }
        out.push(&self.w_proj);
        out.push(&self.b_proj);
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }
}

pub struct PosNodes {
    pub leaves: Vec<NodeId>,
    pub masked_table: NodeId,
    pub fwd: Vec<LstmComponentNodes>,
    pub bwd: Vec<LstmComponentNodes>,
    pub w_proj: NodeId,
    pub b_proj: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

pub fn register_pos(
    tape: &mut Tape64,
    model: &PosModel,
    dropconnect: f64,
    rng: &mut impl Rng,
) -> Result<PosNodes, ModelError> {
    let table = tape.leaf(model.embed.table.clone());
    let mut leaves = vec![table];
    let masked_table = match &model.structural_mask {
        Some(mask) => {
            let m = tape.constant(mask.clone());
            tape.mul(table, m)?
        }
        None => table,
    };
    let mut register_dir = |tape: &mut Tape64,
                            layer: &SparseLstmLayer<f64>,
                            leaves: &mut Vec<NodeId>|
     -> Result<Vec<LstmComponentNodes>, ModelError> {
        let mut nodes = Vec::new();
        for comp in &layer.components {
            let (n, ls) = masked_component(tape, comp, dropconnect, rng)?;
            leaves.extend_from_slice(&ls);
            nodes.push(n);
        }
        Ok(nodes)
    };
    let fwd = register_dir(tape, &model.fwd, &mut leaves)?;
    let bwd = register_dir(tape, &model.bwd, &mut leaves)?;
    let w_proj = tape.leaf(model.w_proj.clone());
    let b_proj = tape.leaf(model.b_proj.clone());
    let w_out = tape.leaf(model.w_out.clone());
    let b_out = tape.leaf(model.b_out.clone());
    leaves.extend_from_slice(&[w_proj, b_proj, w_out, b_out]);
    Ok(PosNodes { leaves, masked_table, fwd, bwd, w_proj, b_proj, w_out, b_out })
}

pub struct PosForward {
    pub loss: NodeId,
    pub logits: NodeId,
}

#[allow(clippy::too_many_arguments)]
pub fn pos_forward(
    tape: &mut Tape64,
    model: &PosModel,
    nodes: &PosNodes,
    inputs: &[usize],
    targets: &[usize],
    steps: usize,
    batch: usize,
    dropout: DropoutSpec,
    rng: &mut impl Rng,
) -> Result<PosForward, ModelError> {
    let k = model.embed.table.cols();
    let mut x = tape.embed(nodes.masked_table, inputs)?;
    if let Some(mask) = embedding_dropout_mask(inputs, steps, batch, k, dropout, rng) {
        let m = tape.constant(mask);
        x = tape.mul(x, m)?;
    }
    let bi = bilstm_forward(
        tape,
        (&model.fwd.plan, nodes.fwd.as_slice()),
        (&model.bwd.plan, nodes.bwd.as_slice()),
        x,
        steps,
        batch,
    )?;
    let h = tape.concat_rows(&bi.outputs)?;
    let mut p = tape.matmul_tb(h, nodes.w_proj)?;
    p = tape.add_row(p, nodes.b_proj)?;
    p = tape.tanh(p);
    let mut logits = tape.matmul_tb(p, nodes.w_out)?;
    logits = tape.add_row(logits, nodes.b_out)?;
    let loss = tape.softmax_cross_entropy(logits, targets, None)?;
    Ok(PosForward { loss, logits })
}

fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_meta_f64(ckpt_meta: Option<&str>, key: &str) -> Result<f64, ModelError> {
    ckpt_meta
        .ok_or_else(|| ModelError::Invalid(format!("checkpoint missing meta `{key}`")))?
        .parse()
        .map_err(|_| ModelError::Invalid(format!("checkpoint meta `{key}` is not a number")))
}

fn allocation_to_blocks(alloc: &EmbeddingAllocation) -> (String, String) {
    let mut bins = String::new();
    for &(w, c) in &alloc.bins {
        bins.push_str(&format!("{w} {c}\n"));
    }
    let mut lengths = String::new();
    for &l in &alloc.lengths {
        lengths.push_str(&l.to_string());
        lengths.push('\n');
    }
    (bins, lengths)
}

fn blocks_to_allocation(
    ckpt: &Checkpoint<f64>,
    vocab_size: usize,
    k: usize,
) -> Result<EmbeddingAllocation, ModelError> {
    let bins_text = ckpt
        .block("embed.bins")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing embed.bins".to_string()))?;
    let mut bins = Vec::new();
    for line in bins_text.lines().filter(|l| !l.is_empty()) {
        let mut it = line.split_whitespace();
        let (Some(w), Some(c)) = (it.next(), it.next()) else {
            return Err(ModelError::Invalid("bad embed.bins line".to_string()));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ModelError::Invalid("bad embed.bins number".to_string()))
        };
        bins.push((parse(w)?, parse(c)?));
    }
    let lengths_text = ckpt
        .block("embed.lengths")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing embed.lengths".to_string()))?;
    let mut lengths = Vec::new();
    for line in lengths_text.lines().filter(|l| !l.is_empty()) {
        lengths.push(line.parse::<usize>().map_err(|_| {
            ModelError::Invalid("bad embed.lengths entry".to_string())
        })?);
    }
    if lengths.len() != vocab_size {
        return Err(ModelError::Invalid(format!(
            "embed.lengths has {} entries for vocabulary of {vocab_size}",
            lengths.len()
        )));
    }
    Ok(EmbeddingAllocation {
        vocab_size,
        max_len: k,
        density: parse_meta_f64(ckpt.meta_value("embed.density"), "embed.density")?,
        alpha: parse_meta_f64(ckpt.meta_value("embed.alpha"), "embed.alpha")?,
        bins,
        lengths,
    })
}

fn embed_from_checkpoint(
    ckpt: &Checkpoint<f64>,
    vocab_size: usize,
) -> Result<SparseEmbeddingParams<f64>, ModelError> {
    let table = ckpt.param("embed.table")?.clone();
    let k = table.cols();
    let allocation = blocks_to_allocation(ckpt, vocab_size, k)?;
    let lengths_text = ckpt
        .block("embed.lengths_by_id")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing embed.lengths_by_id".to_string()))?;
    let mut lengths_by_id = Vec::new();
    for line in lengths_text.lines().filter(|l| !l.is_empty()) {
        lengths_by_id.push(line.parse::<usize>().map_err(|_| {
            ModelError::Invalid("bad embed.lengths_by_id entry".to_string())
        })?);
    }
    if lengths_by_id.len() != table.rows() {
        return Err(ModelError::Invalid(
            "embed.lengths_by_id does not match table rows".to_string(),
        ));
    }
    Ok(SparseEmbeddingParams { table, lengths_by_id, allocation })
}

fn push_embed(ckpt: &mut Checkpoint<f64>, embed: &SparseEmbeddingParams<f64>) {
    ckpt.set_meta("embed.density", format_f64(embed.allocation.density));
    ckpt.set_meta("embed.alpha", format_f64(embed.allocation.alpha));
    let (bins, lengths) = allocation_to_blocks(&embed.allocation);
    ckpt.add_block("embed.bins", &bins);
    ckpt.add_block("embed.lengths", &lengths);
    let by_id: String = embed
        .lengths_by_id
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    ckpt.add_block("embed.lengths_by_id", &by_id);
    ckpt.push_param("embed.table", embed.table.clone());
}

fn push_layer(ckpt: &mut Checkpoint<f64>, name: &str, layer: &SparseLstmLayer<f64>) {
    ckpt.add_block(&format!("{name}.plan"), &layer.plan.to_string());
    for (ci, comp) in layer.components.iter().enumerate() {
        ckpt.push_param(&format!("{name}.comp{ci}.w_hi"), comp.w_hi.clone());
        ckpt.push_param(&format!("{name}.comp{ci}.w_hh"), comp.w_hh.clone());
        ckpt.push_param(&format!("{name}.comp{ci}.b_ih"), comp.b_ih.clone());
        ckpt.push_param(&format!("{name}.comp{ci}.b_hh"), comp.b_hh.clone());
    }
}

fn layer_from_checkpoint(
    ckpt: &Checkpoint<f64>,
    name: &str,
) -> Result<SparseLstmLayer<f64>, ModelError> {
    let plan_text = ckpt
        .block(&format!("{name}.plan"))
        .ok_or_else(|| ModelError::Invalid(format!("checkpoint missing {name}.plan")))?;
    let plan: RecurrentSparsityPlan = plan_text
        .parse()
        .map_err(|e: PlanError| ModelError::Invalid(format!("{name}.plan: {e}")))?;
    let mut components = Vec::with_capacity(plan.components.len());
    for ci in 0..plan.components.len() {
        components.push(LstmComponentParams {
            w_hi: ckpt.param(&format!("{name}.comp{ci}.w_hi"))?.clone(),
            w_hh: ckpt.param(&format!("{name}.comp{ci}.w_hh"))?.clone(),
            b_ih: ckpt.param(&format!("{name}.comp{ci}.b_ih"))?.clone(),
            b_hh: ckpt.param(&format!("{name}.comp{ci}.b_hh"))?.clone(),
        });
    }
    let layer = SparseLstmLayer { plan, components };
    debug_assert_eq!(layer.param_count(), count_lstm_params(&layer.plan));
    Ok(layer)
}

/// Everything needed to evaluate later: weights, layer plans, vocabulary,
/// and (for pos) the tag inventory.
pub fn lm_to_checkpoint(
    model: &LmModel,
    vocab: &Vocabulary,
    meta: &[(&str, String)],
) -> Checkpoint<f64> {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("model", "lm-stack");
    ckpt.set_meta("tie_weights", (model.decoder.is_none()).to_string());
    ckpt.set_meta("layers", model.layers.len().to_string());
    ckpt.set_meta("strategy", vocab.strategy().to_string());
    for (key, value) in meta {
        ckpt.set_meta(key, value);
    }
    ckpt.add_block("vocab", &vocab.to_tsv());
    push_embed(&mut ckpt, &model.embed);
    for (li, layer) in model.layers.iter().enumerate() {
        push_layer(&mut ckpt, &format!("layer{li}"), layer);
    }
    if let Some(dec) = &model.decoder {
        ckpt.push_param("decoder.weight", dec.clone());
    }
    ckpt.push_param("decoder.bias", model.out_bias.clone());
    ckpt
}

pub fn lm_from_checkpoint(ckpt: &Checkpoint<f64>) -> Result<(LmModel, Vocabulary), ModelError> {
    let strategy = ckpt
        .meta_value("strategy")
        .unwrap_or("up")
        .parse()
        .map_err(|_| ModelError::Invalid("bad strategy meta".to_string()))?;
    let vocab_text = ckpt
        .block("vocab")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing vocab".to_string()))?;
    let vocab = Vocabulary::from_tsv(vocab_text, strategy)
        .map_err(|e| ModelError::Invalid(format!("vocab block: {e}")))?;
    let embed = embed_from_checkpoint(ckpt, vocab.len())?;
    let n_layers: usize = ckpt
        .meta_value("layers")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing layers meta".to_string()))?
        .parse()
        .map_err(|_| ModelError::Invalid("bad layers meta".to_string()))?;
    let mut layers = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        layers.push(layer_from_checkpoint(ckpt, &format!("layer{li}"))?);
    }
    let tied = ckpt.meta_value("tie_weights") == Some("true");
    let decoder = if tied {
        None
    } else {
        Some(ckpt.param("decoder.weight")?.clone())
    };
    let out_bias = ckpt.param("decoder.bias")?.clone();
    let vocab_size = vocab.len();
    let mut model = LmModel::assemble(embed, layers, decoder, vocab_size);
    model.out_bias = out_bias;
    Ok((model, vocab))
}

pub fn pos_to_checkpoint(
    model: &PosModel,
    vocab: &Vocabulary,
    tags: &TagSet,
    meta: &[(&str, String)],
) -> Checkpoint<f64> {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("model", "pos-bilstm");
    ckpt.set_meta("strategy", vocab.strategy().to_string());
    for (key, value) in meta {
        ckpt.set_meta(key, value);
    }
    ckpt.add_block("vocab", &vocab.to_tsv());
    let tag_lines: String = (0..tags.len())
        .map(|i| format!("{}\n", tags.tag(i).expect("dense tag ids")))
        .collect();
    ckpt.add_block("tagset", &tag_lines);
    push_embed(&mut ckpt, &model.embed);
    push_layer(&mut ckpt, "fwd", &model.fwd);
    push_layer(&mut ckpt, "bwd", &model.bwd);
    ckpt.push_param("proj.weight", model.w_proj.clone());
    ckpt.push_param("proj.bias", model.b_proj.clone());
    ckpt.push_param("out.weight", model.w_out.clone());
    ckpt.push_param("out.bias", model.b_out.clone());
    ckpt
}

pub fn pos_from_checkpoint(
    ckpt: &Checkpoint<f64>,
) -> Result<(PosModel, Vocabulary, TagSet), ModelError> {
    let strategy = ckpt
        .meta_value("strategy")
        .unwrap_or("up")
        .parse()
        .map_err(|_| ModelError::Invalid("bad strategy meta".to_string()))?;
    let vocab_text = ckpt
        .block("vocab")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing vocab".to_string()))?;
    let vocab = Vocabulary::from_tsv(vocab_text, strategy)
        .map_err(|e| ModelError::Invalid(format!("vocab block: {e}")))?;
    let tags_text = ckpt
        .block("tagset")
        .ok_or_else(|| ModelError::Invalid("checkpoint missing tagset".to_string()))?;
    let tags = TagSet::from_names(
        tags_text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.to_string())
            .collect(),
    );
    let embed = embed_from_checkpoint(ckpt, vocab.len())?;
    let fwd = layer_from_checkpoint(ckpt, "fwd")?;
    let bwd = layer_from_checkpoint(ckpt, "bwd")?;
    let w_proj = ckpt.param("proj.weight")?.clone();
    let b_proj = ckpt.param("proj.bias")?.clone();
    let w_out = ckpt.param("out.weight")?.clone();
    let b_out = ckpt.param("out.bias")?.clone();
    let tagset_size = b_out.cols();
    let mut model = PosModel::assemble(embed, fwd, bwd, w_proj, w_out, tagset_size);
    model.b_proj = b_proj;
    model.b_out = b_out;
    Ok((model, vocab, tags))
}

/// Argmax accuracy of a logits block against targets.
pub fn argmax_matches(logits: &Tensor64, targets: &[usize]) -> usize {
    let mut correct = 0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    correct
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text).unwrap()
    }

    #[test]
    fn dense_lm_counts_match_closed_form() {
        let c = cfg(
            "task = lm\nseed = 1\nembedding size = 400\nhidden sizes = 1150, 1150\nvocab size = 10000\n",
        );
        let m = LmModel::build_for_count(&c, 10_000).unwrap();
        assert_eq!(m.param_count(), 24_221_600);
    }

    #[test]
    fn match_budget_windows_solve_like_the_planner() {
        let c = cfg(
            "task = lm\nseed = 1\nembedding size = 200\nhidden sizes = 1150, 1150\n\
             segments = 4, 5, 2\ngamma = match-budget\nmatch dense hidden = 575\n\
             match dense embedding = 200\nvocab size = 10000\n",
        );
        let plans = plan_lm_layers(&c).unwrap();
        assert_eq!(plans[0].components[0].input_width, 99);
        assert_eq!(plans[1].components[0].input_width, 344);
        assert_eq!(plans[2].components[0].input_width, 675);
        let m = LmModel::build_for_count(&c, 10_000).unwrap();
        assert_eq!(m.param_count(), 7_068_304);
    }

    #[test]
    fn registration_leaf_order_matches_params() {
        let c = cfg(
            "task = recite\nseed = 3\nembedding size = 6\nhidden sizes = 5\nsegments = 1, 1\n",
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LmModel::build(&c, 9, &mut rng).unwrap();
        let mut tape = Tape64::new();
        let nodes = register_lm(&mut tape, &model, 0.0, &mut rng).unwrap();
        let params = model.params();
        assert_eq!(nodes.leaves.len(), params.len());
        for (leaf, p) in nodes.leaves.iter().zip(&params) {
            assert_eq!(tape.value(*leaf).shape(), p.shape());
        }
    }

    #[test]
    fn lm_checkpoint_round_trip_preserves_outputs() {
        let c = cfg(
            "task = recite\nseed = 3\nembedding size = 6\nhidden sizes = 5\n\
             embedding density = 0.5\nembedding bins = 3\n",
        );
        let tokens: Vec<String> = "a b c d e a b c".split(' ').map(String::from).collect();
        let vocab = Vocabulary::build(&tokens, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = LmModel::build(&c, vocab.len(), &mut rng).unwrap();
        let ckpt = lm_to_checkpoint(&model, &vocab, &[("epoch", "4".to_string())]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(loaded.meta_value("epoch"), Some("4"));
        let (restored, rvocab) = lm_from_checkpoint(&loaded).unwrap();
        assert_eq!(rvocab.len(), vocab.len());
        assert_eq!(restored.param_count(), model.param_count());

        let inputs = [2usize, 3, 4, 5];
        let targets = [3usize, 4, 5, 6];
        let run = |m: &LmModel| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape64::new();
            let nodes = register_lm(&mut tape, m, 0.0, &mut r).unwrap();
            let f = lm_forward(
                &mut tape,
                m,
                &nodes,
                &inputs,
                &targets,
                2,
                2,
                None,
                DropoutSpec::off(),
                &mut r,
            )
            .unwrap();
            tape.value(f.loss).scalar()
        };
        assert_eq!(run(&model), run(&restored));
    }

    #[test]
    fn pos_model_counts_match_stated_shapes() {
        let c = cfg("task = pos\nseed = 1\nembedding size = 20\n");
        let m = PosModel::build_for_count(&c, 43_815, 49).unwrap();
        let table: std::collections::BTreeMap<_, _> = m.param_table().into_iter().collect();
        assert_eq!(table["embedding"], 876_300);
        assert_eq!(m.param_count(), 879_609);
    }

    #[test]
    fn pos_forward_shapes_and_checkpoint_round_trip() {
        let c = cfg("task = pos\nseed = 1\nembedding size = 8\nembedding density = 0.5\n");
        let tokens: Vec<String> = "w x y z w x".split(' ').map(String::from).collect();
        let vocab = Vocabulary::build(&tokens, 1).unwrap();
        let sentences = vec![sparseq_core::corpus::TaggedSentence {
            tokens: vec!["w".into(), "x".into()],
            tags: vec!["A".into(), "B".into()],
        }];
        let tags = TagSet::build(&sentences);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = PosModel::build(&c, vocab.len(), tags.len(), &mut rng).unwrap();

        let inputs = [2usize, 3, 4, 5];
        let targets = [0usize, 1, 0, 1];
        let run = |m: &PosModel| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape64::new();
            let nodes = register_pos(&mut tape, m, 0.0, &mut r).unwrap();
            let f = pos_forward(
                &mut tape, m, &nodes, &inputs, &targets, 2, 2, DropoutSpec::off(), &mut r,
            )
            .unwrap();
            (tape.value(f.loss).scalar(), tape.value(f.logits).shape())
        };
        let (loss, shape) = run(&model);
        assert!(loss.is_finite());
        assert_eq!(shape, [4, tags.len()]);

        let ckpt = pos_to_checkpoint(&model, &vocab, &tags, &[]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        ckpt.save(&path).unwrap();
        let (restored, _, rtags) =
            pos_from_checkpoint(&Checkpoint::<f64>::load(&path).unwrap()).unwrap();
        assert_eq!(rtags.id("A"), tags.id("A"));
        assert_eq!(run(&restored).0, loss);
    }

    #[test]
    fn dropconnect_masks_scale_gradients_to_raw_leaves() {
        let c = cfg("task = recite\nseed = 3\nembedding size = 4\nhidden sizes = 3\n");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = LmModel::build(&c, 6, &mut rng).unwrap();
        let mut tape = Tape64::new();
        let nodes = register_lm(&mut tape, &model, 0.5, &mut rng).unwrap();
        let f = lm_forward(
            &mut tape,
            &model,
            &nodes,
            &[2, 3],
            &[3, 4],
            2,
            1,
            None,
            DropoutSpec::off(),
            &mut rng,
        )
        .unwrap();
        tape.backward(f.loss).unwrap();
        for leaf in &nodes.leaves {
            assert!(tape.grad(*leaf).is_some() || tape.value(*leaf).len() > 0);
        }
    }

    #[test]
    fn argmax_counts_matches() {
        let logits = Tensor64::from_rows(&[vec![0.1, 0.9], vec![0.7, 0.2], vec![0.5, 0.5]]);
        assert_eq!(argmax_matches(&logits, &[1, 0, 0]), 3);
        assert_eq!(argmax_matches(&logits, &[0, 0, 1]), 1);
    }
}
