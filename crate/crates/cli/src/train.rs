//! Training loops and evaluation passes for the three harnesses.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparseq_core::corpus::{
    lm_batches, load_tagged_corpus, load_text_corpus, CorpusError, LmBatch, TagSet,
    TaggedSentence, Vocabulary,
};
use sparseq_core::optim::{clip_gradients, exp_decay_schedule, Adam, OptimError, SgdMomentum};
use sparseq_core::recurrent::LstmState;
use sparseq_core::{Tape64, Tensor64};

use crate::config::{ExperimentConfig, Optimizer, Task};
use crate::metrics::{write_csv, MetricsRow};
use crate::model::{
    argmax_matches, lm_forward, lm_from_checkpoint, lm_to_checkpoint, pos_forward,
    pos_from_checkpoint, pos_to_checkpoint, register_lm, register_pos, DropoutSpec, LmModel,
    ModelError, PosModel,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Checkpoint(#[from] sparseq_core::checkpoint::CheckpointError),
    #[error("{0}")]
    Data(String),
    #[error("optimizer: {0}")]
    Optim(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub rows: Vec<MetricsRow>,
    /// Epoch of the saved checkpoint, when any epoch finished.
    pub best_epoch: Option<usize>,
    /// Lowest validation loss (lm/pos) reached.
    pub best_valid_loss: f64,
    /// Validation accuracy at the best epoch (pos).
    pub best_valid_accuracy: Option<f64>,
    /// Test metrics of the checkpointed model (lm/pos with test data).
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Running maximum memorization accuracy (recite).
    pub max_recite_accuracy: f64,
    pub diverged: bool,
}

impl RunArtifacts {
    fn new() -> Self {
        RunArtifacts {
            rows: Vec::new(),
            best_epoch: None,
            best_valid_loss: f64::INFINITY,
            best_valid_accuracy: None,
            test_loss: None,
            test_accuracy: None,
            max_recite_accuracy: 0.0,
            diverged: false,
        }
    }
}

struct EpochAverage {
    weighted_loss: f64,
    tokens: usize,
}

impl EpochAverage {
    fn new() -> Self {
        EpochAverage { weighted_loss: 0.0, tokens: 0 }
    }

    fn add(&mut self, loss: f64, tokens: usize) {
        self.weighted_loss += loss * tokens as f64;
        self.tokens += tokens;
    }

    fn mean(&self) -> f64 {
        if self.tokens == 0 {
            f64::NAN
        } else {
            self.weighted_loss / self.tokens as f64
        }
    }
}

/// Evaluation-mode pass over contiguous batches with carried state:
/// mean loss and greedy next-token accuracy.
pub fn eval_lm_stream(model: &LmModel, batches: &[LmBatch]) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut states: Option<Vec<Vec<LstmState<f64>>>> = None;
    let mut avg = EpochAverage::new();
    let mut correct = 0usize;
    for batch in batches {
        let mut tape = Tape64::new();
        let nodes = register_lm(&mut tape, model, 0.0, &mut rng).expect("registration");
        let fwd = lm_forward(
            &mut tape,
            model,
            &nodes,
            &batch.inputs,
            &batch.targets,
            batch.steps,
            batch.batch,
            states.as_deref(),
            DropoutSpec::off(),
            &mut rng,
        )
        .expect("eval forward");
        avg.add(tape.value(fwd.loss).scalar(), batch.targets.len());
        correct += argmax_matches(tape.value(fwd.logits), &batch.targets);
        states = Some(fwd.final_states);
    }
    let acc = if avg.tokens == 0 { 0.0 } else { correct as f64 / avg.tokens as f64 };
    (avg.mean(), acc)
}

/// Greedy argmax next-token accuracy over the whole training stream.
pub fn recite_accuracy(
    model: &LmModel,
    ids: &[usize],
    batch_size: usize,
    bptt: usize,
) -> Result<(f64, f64), TrainError> {
    let batches = lm_batches(ids, batch_size, bptt)?;
    let (loss, acc) = eval_lm_stream(model, &batches);
    Ok((acc, loss))
}

pub struct PosBatch {
    /// Step-major ids, row t*batch + b.
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// 0.0 marks eval tokens whose tag is outside the training inventory.
    pub weights: Vec<f64>,
    pub steps: usize,
    pub batch: usize,
}

pub struct PosData {
    /// Token ids plus per-token tag ids (None for tags unseen in training).
    pub sentences: Vec<(Vec<usize>, Vec<Option<usize>>)>,
    pub unknown_tags: usize,
    pub tokens: usize,
}

pub fn numericalize_tagged(
    sentences: &[TaggedSentence],
    vocab: &Vocabulary,
    tags: &TagSet,
) -> PosData {
    let mut unknown_tags = 0usize;
    let mut tokens = 0usize;
    let out = sentences
        .iter()
        .map(|s| {
            tokens += s.tokens.len();
            let ids = vocab.numericalize(&s.tokens);
            let tag_ids = s
                .tags
                .iter()
                .map(|t| {
                    let id = tags.id(t);
                    if id.is_none() {
                        unknown_tags += 1;
                    }
                    id
                })
                .collect();
            (ids, tag_ids)
        })
        .collect();
    PosData { sentences: out, unknown_tags, tokens }
}

/// Groups sentences of equal length into batches, so no padding is needed
/// and the bidirectional pass never crosses a pad token. `shuffle` permutes
/// sentences within each length group.
pub fn pos_batches(
    data: &PosData,
    batch_size: usize,
    shuffle: Option<&mut ChaCha8Rng>,
) -> Vec<PosBatch> {
    let mut order: Vec<usize> = (0..data.sentences.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order.sort_by_key(|&i| data.sentences[i].0.len());

    let mut batches = Vec::new();
    let mut group: Vec<usize> = Vec::new();
    let flush = |group: &mut Vec<usize>, batches: &mut Vec<PosBatch>| {
        if group.is_empty() {
            return;
        }
        let steps = data.sentences[group[0]].0.len();
        let batch = group.len();
        let mut inputs = vec![0usize; steps * batch];
        let mut targets = vec![0usize; steps * batch];
        let mut weights = vec![1.0f64; steps * batch];
        for (b, &si) in group.iter().enumerate() {
            let (ids, tag_ids) = &data.sentences[si];
            for t in 0..steps {
                let r = t * batch + b;
                inputs[r] = ids[t];
                match tag_ids[t] {
                    Some(tag) => targets[r] = tag,
                    None => {
                        targets[r] = 0;
                        weights[r] = 0.0;
                    }
                }
            }
        }
        batches.push(PosBatch { inputs, targets, weights, steps, batch });
        group.clear();
    };
    for &i in &order {
        let len = data.sentences[i].0.len();
        if len == 0 {
            continue;
        }
        if !group.is_empty()
            && (data.sentences[group[0]].0.len() != len || group.len() == batch_size)
        {
            flush(&mut group, &mut batches);
        }
        group.push(i);
    }
    flush(&mut group, &mut batches);
    batches
}

/// Evaluation-mode loss and token accuracy. Tokens with out-of-inventory
/// tags count as errors and contribute no loss.
pub fn eval_pos(model: &PosModel, data: &PosData) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = pos_batches(data, 64, None);
    let mut avg = EpochAverage::new();
    let mut correct = 0usize;
    let mut total = 0usize;
    for b in &batches {
        let mut tape = Tape64::new();
        let nodes = register_pos(&mut tape, model, 0.0, &mut rng).expect("registration");
        let fwd = pos_forward(
            &mut tape,
            model,
            &nodes,
            &b.inputs,
            &b.targets,
            b.steps,
            b.batch,
            DropoutSpec::off(),
            &mut rng,
        )
        .expect("eval forward");
        let weighted: f64 = b.weights.iter().sum();
        avg.add(tape.value(fwd.loss).scalar(), weighted.round() as usize);
        let logits = tape.value(fwd.logits);
        for (r, (&t, &w)) in b.targets.iter().zip(&b.weights).enumerate() {
            total += 1;
            if w > 0.0 && argmax_matches_row(logits, r) == t {
                correct += 1;
            }
        }
    }
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (avg.mean(), acc)
}

fn argmax_matches_row(logits: &Tensor64, r: usize) -> usize {
    let row = logits.row(r);
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

enum AnyOptimizer {
    Sgd(SgdMomentum<f64>),
    Adam(Adam<f64>),
}

impl AnyOptimizer {
    fn for_config(cfg: &ExperimentConfig, params: &[&Tensor64]) -> Self {
        match cfg.optimizer {
            Optimizer::Sgd => AnyOptimizer::Sgd(SgdMomentum::for_params(cfg.momentum, params)),
            Optimizer::Adam => AnyOptimizer::Adam(Adam::for_params(params)),
        }
    }

    fn step(
        &mut self,
        params: &mut [&mut Tensor64],
        grads: &[Tensor64],
        lr: f64,
    ) -> Result<(), OptimError> {
        match self {
            AnyOptimizer::Sgd(o) => o.step(params, grads, lr),
            AnyOptimizer::Adam(o) => o.step(params, grads, lr),
        }
    }
}

fn collect_grads(tape: &mut Tape64, leaves: &[sparseq_core::autodiff::NodeId]) -> Vec<Tensor64> {
    leaves
        .iter()
        .map(|&id| {
            let shape = tape.value(id).shape();
            tape.take_grad(id)
                .unwrap_or_else(|| Tensor64::zeros(shape[0], shape[1]))
        })
        .collect()
}

fn required_data(path: &Option<std::path::PathBuf>, what: &str) -> Result<std::path::PathBuf, TrainError> {
    path.clone()
        .ok_or_else(|| TrainError::Data(format!("config needs `{what}`")))
}

fn load_ids(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<Vec<usize>, TrainError> {
    let tokens = load_text_corpus(path)?;
    if tokens.is_empty() {
        return Err(TrainError::Data(format!("{} is empty", path.display())));
    }
    Ok(vocab.numericalize(&tokens))
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<RunArtifacts, TrainError> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    match cfg.task {
        Task::Pos => train_pos(cfg),
        Task::Lm | Task::Recite => train_lm(cfg),
    }
}

fn divergence_row(cfg: &ExperimentConfig, epoch: usize, loss: f64, lr: f64, start: Instant) -> MetricsRow {
    MetricsRow {
        run_id: cfg.run_id.clone(),
        task: cfg.task.to_string(),
        epoch,
        split: "train".to_string(),
        loss,
        perplexity: Some(loss.exp()),
        accuracy: None,
        lr,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn train_lm(cfg: &ExperimentConfig) -> Result<RunArtifacts, TrainError> {
    let start = Instant::now();
    let train_path = required_data(&cfg.train_data, "train data")?;
    let tokens = load_text_corpus(&train_path)?;
    let vocab = Vocabulary::build_ordered(&tokens, cfg.min_count, cfg.order_strategy, cfg.seed)?;
    let train_ids = vocab.numericalize(&tokens);
    let batches = lm_batches(&train_ids, cfg.batch_size, cfg.bptt_length)?;

    let valid_ids = match (&cfg.task, &cfg.valid_data) {
        (Task::Lm, Some(path)) => Some(load_ids(path, &vocab)?),
        (Task::Lm, None) => {
            return Err(TrainError::Data("lm training needs `valid data`".to_string()))
        }
        _ => None,
    };
    let valid_batches = valid_ids
        .as_ref()
        .map(|ids| lm_batches(ids, cfg.batch_size, cfg.bptt_length))
        .transpose()?;
    let test_ids = match (&cfg.task, &cfg.test_data) {
        (Task::Lm, Some(path)) => Some(load_ids(path, &vocab)?),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = LmModel::build(cfg, vocab.len(), &mut rng)?;
    let mut optimizer = AnyOptimizer::for_config(cfg, &model.params());
    let dropout = DropoutSpec::from_config(cfg);

    let mut art = RunArtifacts::new();
    let ckpt_path = cfg.checkpoint_path();
    let metrics_path = cfg.metrics_path();

    'epochs: for epoch in 0..cfg.epochs {
        let lr = exp_decay_schedule(cfg.learning_rate, cfg.lr_decay_factor, epoch);
        let mut avg = EpochAverage::new();
        let mut states: Option<Vec<Vec<LstmState<f64>>>> = None;
        for batch in &batches {
            let mut tape = Tape64::new();
            let nodes = register_lm(&mut tape, &model, cfg.weight_dropconnect, &mut rng)?;
            let fwd = lm_forward(
                &mut tape,
                &model,
                &nodes,
                &batch.inputs,
                &batch.targets,
                batch.steps,
                batch.batch,
                states.as_deref(),
                dropout,
                &mut rng,
            )?;
            let loss = tape.value(fwd.loss).scalar();
            if !loss.is_finite() {
                art.rows.push(divergence_row(cfg, epoch, loss, lr, start));
                art.diverged = true;
                break 'epochs;
            }
            tape.backward(fwd.loss).map_err(|e| TrainError::Optim(e.to_string()))?;
            let mut grads = collect_grads(&mut tape, &nodes.leaves);
            drop(tape);
            if cfg.grad_clip > 0.0 {
                if clip_gradients(&mut grads, cfg.grad_clip).is_err() {
                    art.rows.push(divergence_row(cfg, epoch, f64::NAN, lr, start));
                    art.diverged = true;
                    break 'epochs;
                }
            }
            let mut params = model.params_mut();
            if let Err(e) = optimizer.step(&mut params, &grads, lr) {
                match e {
                    OptimError::NonFiniteGradient { .. } => {
                        art.rows.push(divergence_row(cfg, epoch, f64::NAN, lr, start));
                        art.diverged = true;
                        break 'epochs;
                    }
                    other => return Err(TrainError::Optim(other.to_string())),
                }
            }
            avg.add(loss, batch.targets.len());
            states = Some(fwd.final_states);
        }

        match cfg.task {
            Task::Recite => {
                let (eval_loss, acc) = eval_lm_stream(&model, &batches);
                art.rows.push(MetricsRow {
                    run_id: cfg.run_id.clone(),
                    task: cfg.task.to_string(),
                    epoch,
                    split: "train".to_string(),
                    loss: eval_loss,
                    perplexity: Some(eval_loss.exp()),
                    accuracy: Some(acc),
                    lr,
                    seconds: start.elapsed().as_secs_f64(),
                });
                if acc > art.max_recite_accuracy {
                    art.max_recite_accuracy = acc;
                    art.best_epoch = Some(epoch);
                    let ckpt = lm_to_checkpoint(
                        &model,
                        &vocab,
                        &[
                            ("epoch", epoch.to_string()),
                            ("accuracy", format!("{acc:?}")),
                            ("seed", cfg.seed.to_string()),
                        ],
                    );
                    ckpt.save(&ckpt_path)?;
                }
                // Memorization is capped at 1; later epochs cannot raise the
                // running maximum the protocol reports.
                if acc >= 1.0 {
                    break 'epochs;
                }
            }
            Task::Lm => {
                art.rows.push(MetricsRow {
                    run_id: cfg.run_id.clone(),
                    task: cfg.task.to_string(),
                    epoch,
                    split: "train".to_string(),
                    loss: avg.mean(),
                    perplexity: Some(avg.mean().exp()),
                    accuracy: None,
                    lr,
                    seconds: start.elapsed().as_secs_f64(),
                });
                let vb = valid_batches.as_ref().expect("checked above");
                let (val_loss, _) = eval_lm_stream(&model, vb);
                art.rows.push(MetricsRow {
                    run_id: cfg.run_id.clone(),
                    task: cfg.task.to_string(),
                    epoch,
                    split: "valid".to_string(),
                    loss: val_loss,
                    perplexity: Some(val_loss.exp()),
                    accuracy: None,
                    lr,
                    seconds: start.elapsed().as_secs_f64(),
                });
                if val_loss < art.best_valid_loss {
                    art.best_valid_loss = val_loss;
                    art.best_epoch = Some(epoch);
                    let ckpt = lm_to_checkpoint(
                        &model,
                        &vocab,
                        &[
                            ("epoch", epoch.to_string()),
                            ("valid_loss", format!("{val_loss:?}")),
                            ("seed", cfg.seed.to_string()),
                        ],
                    );
                    ckpt.save(&ckpt_path)?;
                }
            }
            Task::Pos => unreachable!("handled in train_pos"),
        }
    }

    if let (Task::Lm, Some(test_ids), Some(best_epoch)) =
        (cfg.task, test_ids.as_ref(), art.best_epoch)
    {
        let ckpt = sparseq_core::checkpoint::Checkpoint::<f64>::load(&ckpt_path)?;
        let (best_model, _) = lm_from_checkpoint(&ckpt)?;
        let test_batches = lm_batches(test_ids, cfg.batch_size, cfg.bptt_length)?;
        let (test_loss, _) = eval_lm_stream(&best_model, &test_batches);
        art.test_loss = Some(test_loss);
        art.rows.push(MetricsRow {
            run_id: cfg.run_id.clone(),
            task: cfg.task.to_string(),
            epoch: best_epoch,
            split: "test".to_string(),
            loss: test_loss,
            perplexity: Some(test_loss.exp()),
            accuracy: None,
            lr: exp_decay_schedule(cfg.learning_rate, cfg.lr_decay_factor, best_epoch),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    write_csv(&metrics_path, &art.rows).map_err(io_err(&metrics_path))?;
    Ok(art)
}

fn train_pos(cfg: &ExperimentConfig) -> Result<RunArtifacts, TrainError> {
    let start = Instant::now();
    let train_path = required_data(&cfg.train_data, "train data")?;
    let train_sentences = load_tagged_corpus(&train_path)?;
    if train_sentences.is_empty() {
        return Err(TrainError::Data(format!("{} has no sentences", train_path.display())));
    }
    let train_tokens: Vec<&str> = train_sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| t.as_str()))
        .collect();
    let vocab =
        Vocabulary::build_ordered(&train_tokens, cfg.min_count, cfg.order_strategy, cfg.seed)?;
    let tags = TagSet::build(&train_sentences);
    let train = numericalize_tagged(&train_sentences, &vocab, &tags);

    let valid_path = required_data(&cfg.valid_data, "valid data")?;
    let valid = numericalize_tagged(&load_tagged_corpus(&valid_path)?, &vocab, &tags);
    let test = match &cfg.test_data {
        Some(path) => Some(numericalize_tagged(&load_tagged_corpus(path)?, &vocab, &tags)),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PosModel::build(cfg, vocab.len(), tags.len(), &mut rng)?;
    let mut optimizer = AnyOptimizer::for_config(cfg, &model.params());
    let dropout = DropoutSpec::from_config(cfg);

    let mut art = RunArtifacts::new();
    let ckpt_path = cfg.checkpoint_path();
    let metrics_path = cfg.metrics_path();

    'epochs: for epoch in 0..cfg.epochs {
        let lr = exp_decay_schedule(cfg.learning_rate, cfg.lr_decay_factor, epoch);
        let mut avg = EpochAverage::new();
        let batches = pos_batches(&train, cfg.batch_size, Some(&mut rng));
        for b in &batches {
            let mut tape = Tape64::new();
            let nodes = register_pos(&mut tape, &model, cfg.weight_dropconnect, &mut rng)?;
            let fwd = pos_forward(
                &mut tape,
                &model,
                &nodes,
                &b.inputs
                ,
                &b.targets,
                b.steps,
                b.batch,
                dropout,
                &mut rng,
            )?;
            let loss = tape.value(fwd.loss).scalar();
            if !loss.is_finite() {
                art.rows.push(divergence_row(cfg, epoch, loss, lr, start));
                art.diverged = true;
                break 'epochs;
            }
            tape.backward(fwd.loss).map_err(|e| TrainError::Optim(e.to_string()))?;
            let mut grads = collect_grads(&mut tape, &nodes.leaves);
            drop(tape);
            if cfg.grad_clip > 0.0 {
                if clip_gradients(&mut grads, cfg.grad_clip).is_err() {
                    art.rows.push(divergence_row(cfg, epoch, f64::NAN, lr, start));
                    art.diverged = true;
                    break 'epochs;
                }
            }
            let mut params = model.params_mut();
            if let Err(e) = optimizer.step(&mut params, &grads, lr) {
                match e {
                    OptimError::NonFiniteGradient { .. } => {
                        art.rows.push(divergence_row(cfg, epoch, f64::NAN, lr, start));
                        art.diverged = true;
                        break 'epochs;
                    }
                    other => return Err(TrainError::Optim(other.to_string())),
                }
            }
            avg.add(loss, b.targets.len());
        }

        art.rows.push(MetricsRow {
            run_id: cfg.run_id.clone(),
            task: cfg.task.to_string(),
            epoch,
            split: "train".to_string(),
            loss: avg.mean(),
            perplexity: None,
            accuracy: None,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        let (val_loss, val_acc) = eval_pos(&model, &valid);
        art.rows.push(MetricsRow {
            run_id: cfg.run_id.clone(),
            task: cfg.task.to_string(),
            epoch,
            split: "valid".to_string(),
            loss: val_loss,
            perplexity: None,
            accuracy: Some(val_acc),
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_loss < art.best_valid_loss {
            art.best_valid_loss = val_loss;
            art.best_valid_accuracy = Some(val_acc);
            art.best_epoch = Some(epoch);
            let ckpt = pos_to_checkpoint(
                &model,
                &vocab,
                &tags,
                &[
                    ("epoch", epoch.to_string()),
                    ("valid_loss", format!("{val_loss:?}")),
                    ("seed", cfg.seed.to_string()),
                ],
            );
            ckpt.save(&ckpt_path)?;
        }
    }

    if let (Some(test), Some(best_epoch)) = (test.as_ref(), art.best_epoch) {
        let ckpt = sparseq_core::checkpoint::Checkpoint::<f64>::load(&ckpt_path)?;
        let (best_model, _, _) = pos_from_checkpoint(&ckpt)?;
        let (test_loss, test_acc) = eval_pos(&best_model, test);
        art.test_loss = Some(test_loss);
        art.test_accuracy = Some(test_acc);
        art.rows.push(MetricsRow {
            run_id: cfg.run_id.clone(),
            task: cfg.task.to_string(),
            epoch: best_epoch,
            split: "test".to_string(),
            loss: test_loss,
            perplexity: None,
            accuracy: Some(test_acc),
            lr: exp_decay_schedule(cfg.learning_rate, cfg.lr_decay_factor, best_epoch),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    write_csv(&metrics_path, &art.rows).map_err(io_err(&metrics_path))?;
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{register_lm, LmModel};
    use rand::SeedableRng;
    use sparseq_core::Tape64;

    fn tiny_lm_config(dir: &std::path::Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(
            "task = recite\nseed = 3\nembedding size = 16\nhidden sizes = 24\nsegments = 1,1\n",
        )
        .unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn single_batch_overfit_drives_loss_down() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_lm_config(dir.path());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = LmModel::build(&cfg, 30, &mut rng).unwrap();
        let inputs: Vec<usize> = (0..60).map(|i| (i * 7 + 3) % 30).collect();
        let targets: Vec<usize> = (0..60).map(|i| (i * 7 + 10) % 30).collect();
        let mut optimizer = AnyOptimizer::Sgd(SgdMomentum::for_params(0.9, &model.params()));
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..60 {
            let mut tape = Tape64::new();
            let nodes = register_lm(&mut tape, &model, 0.0, &mut rng).unwrap();
            let fwd = lm_forward(
                &mut tape,
                &model,
                &nodes,
                &inputs,
                &targets,
                12,
                5,
                None,
                DropoutSpec::off(),
                &mut rng,
            )
            .unwrap();
            let loss = tape.value(fwd.loss).scalar();
            if step == 0 {
                first = loss;
            }
            last = loss;
            tape.backward(fwd.loss).unwrap();
            let grads = collect_grads(&mut tape, &nodes.leaves);
            drop(tape);
            let total: f64 = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
            assert!(total > 0.0, "gradients vanished at step {step}");
            let mut params = model.params_mut();
            optimizer.step(&mut params, &grads, 0.5).unwrap();
        }
        assert!(
            last < first * 0.2,
            "one-batch overfit failed: first {first}, last {last}"
        );
    }

    fn data(sentences: &[(&str, &str)]) -> PosData {
        // each pair: space-separated ids / tags, "x" tag id None
        let sentences = sentences
            .iter()
            .map(|(ids, tags)| {
                let ids: Vec<usize> = ids.split(' ').map(|v| v.parse().unwrap()).collect();
                let tags: Vec<Option<usize>> = tags
                    .split(' ')
                    .map(|v| if v == "x" { None } else { Some(v.parse().unwrap()) })
                    .collect();
                (ids, tags)
            })
            .collect();
        let mut d = PosData { sentences, unknown_tags: 0, tokens: 0 };
        d.tokens = d.sentences.iter().map(|(ids, _)| ids.len()).sum();
        d
    }

    #[test]
    fn pos_batches_group_by_exact_length() {
        let d = data(&[
            ("1 2 3", "0 1 0"),
            ("4 5", "1 1"),
            ("6 7 8", "0 0 1"),
            ("9 10", "0 x"),
        ]);
        let batches = pos_batches(&d, 8, None);
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.inputs.len(), b.steps * b.batch);
        }
        let two = batches.iter().find(|b| b.steps == 2).unwrap();
        assert_eq!(two.batch, 2);
        // step-major layout: row t*batch+b
        assert_eq!(two.inputs, vec![4, 9, 5, 10]);
        assert_eq!(two.weights, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn pos_batches_cap_at_batch_size() {
        let d = data(&[("1 2", "0 0"), ("3 4", "0 0"), ("5 6", "0 0")]);
        let batches = pos_batches(&d, 2, None);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].batch, 2);
        assert_eq!(batches[1].batch, 1);
    }

    #[test]
    fn epoch_average_weights_by_tokens() {
        let mut avg = EpochAverage::new();
        avg.add(1.0, 10);
        avg.add(4.0, 30);
        assert!((avg.mean() - 3.25).abs() < 1e-12);
    }
}
