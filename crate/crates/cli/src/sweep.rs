//! Multi-run protocols: the recite learning-rate sweep, the dropout grid,
//! and the embedding-order comparison built on top of it.

use sparseq_core::embedding::OrderStrategy;

use crate::config::{ExperimentConfig, Task};
use crate::train::{run_train, TrainError};

/// Candidate initial learning rates for recitation, tried in this order.
pub const RECITE_LRS: [f64; 2] = [10.0, 5.0];

pub const WORD_DROPOUT_GRID: [f64; 3] = [0.0, 0.1, 0.2];
pub const VARIATIONAL_DROPOUT_GRID: [f64; 4] = [0.0, 0.1, 0.2, 0.4];
pub const WEIGHT_DROP_GRID: [f64; 3] = [0.0, 0.2, 0.4];

#[derive(Debug, Clone)]
pub struct ReciteRun {
    pub lr: f64,
    pub best_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct ReciteOutcome {
    pub runs: Vec<ReciteRun>,
    /// Index into `runs` of the highest-accuracy run.
    pub best: usize,
}

/// Runs recitation at each candidate learning rate and keeps the best
/// running-maximum accuracy. Accuracy is capped at 1, so once a run recites
/// the corpus perfectly the remaining candidates are skipped.
pub fn recite_protocol(base: &ExperimentConfig) -> Result<ReciteOutcome, TrainError> {
    assert!(matches!(base.task, Task::Recite));
    let mut runs: Vec<ReciteRun> = Vec::new();
    for lr in RECITE_LRS {
        let mut cfg = base.clone();
        cfg.learning_rate = lr;
        cfg.run_id = format!("{}_lr{}", base.run_id, lr);
        let art = run_train(&cfg)?;
        eprintln!(
            "{}: best accuracy {:.4}{}",
            cfg.run_id,
            art.max_recite_accuracy,
            if art.diverged { " (diverged)" } else { "" }
        );
        runs.push(ReciteRun {
            lr,
            best_accuracy: art.max_recite_accuracy,
            best_epoch: art.best_epoch,
            diverged: art.diverged,
        });
        if art.max_recite_accuracy >= 1.0 {
            break;
        }
    }
    let mut best = 0;
    for i in 1..runs.len() {
        if runs[i].best_accuracy > runs[best].best_accuracy {
            best = i;
        }
    }
    Ok(ReciteOutcome { runs, best })
}

#[derive(Debug, Clone, Copy)]
pub struct DropoutChoice {
    pub word: f64,
    pub variational: f64,
    pub weight_drop: f64,
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub choice: DropoutChoice,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub runs: Vec<GridRun>,
    pub best: usize,
}

fn dropout_tag(v: f64) -> String {
    format!("{}", (v * 10.0).round() as u32)
}

/// Exhaustive sweep over the dropout grid; selects the combination with the
/// highest validation accuracy (ties broken by lower validation loss).
pub fn pos_grid_search(base: &ExperimentConfig) -> Result<GridOutcome, TrainError> {
    assert!(matches!(base.task, Task::Pos));
    let mut runs: Vec<GridRun> = Vec::new();
    for word in WORD_DROPOUT_GRID {
        for variational in VARIATIONAL_DROPOUT_GRID {
            for weight_drop in WEIGHT_DROP_GRID {
                let choice = DropoutChoice { word, variational, weight_drop };
                let mut cfg = base.clone();
                cfg.word_dropout = word;
                cfg.variational_dropout = variational;
                cfg.weight_dropconnect = weight_drop;
                cfg.run_id = format!(
                    "{}_w{}v{}d{}",
                    base.run_id,
                    dropout_tag(word),
                    dropout_tag(variational),
                    dropout_tag(weight_drop)
                );
                let art = run_train(&cfg)?;
                if art.diverged {
                    eprintln!("{}: diverged, excluded", cfg.run_id);
                    continue;
                }
                let run = GridRun {
                    choice,
                    valid_loss: art.best_valid_loss,
                    valid_accuracy: art.best_valid_accuracy.unwrap_or(0.0),
                    test_accuracy: art.test_accuracy,
                };
                eprintln!(
                    "{}: valid acc {:.4} loss {:.4}",
                    cfg.run_id, run.valid_accuracy, run.valid_loss
                );
                runs.push(run);
            }
        }
    }
    if runs.is_empty() {
        return Err(TrainError::Data("every grid combination diverged".to_string()));
    }
    let mut best = 0;
    for i in 1..runs.len() {
        let better = runs[i].valid_accuracy > runs[best].valid_accuracy
            || (runs[i].valid_accuracy == runs[best].valid_accuracy
                && runs[i].valid_loss < runs[best].valid_loss);
        if better {
            best = i;
        }
    }
    Ok(GridOutcome { runs, best })
}

#[derive(Debug, Clone)]
pub struct StrategySummary {
    pub strategy: OrderStrategy,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct OrderingOutcome {
    pub choice: DropoutChoice,
    pub summaries: Vec<StrategySummary>,
}

/// Order-strategy comparison: the dropout grid picks one combination on the
/// base ordering and seed, then every strategy runs with that combination
/// across the given seeds. Reported per strategy: mean test accuracy.
pub fn ordering_study(
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<OrderingOutcome, TrainError> {
    let mut grid_base = base.clone();
    grid_base.run_id = format!("{}_grid", base.run_id);
    let grid = pos_grid_search(&grid_base)?;
    let choice = grid.runs[grid.best].choice;
    eprintln!(
        "selected dropouts: word {} variational {} weight drop {}",
        choice.word, choice.variational, choice.weight_drop
    );

    let mut summaries = Vec::new();
    for strategy in [OrderStrategy::Up, OrderStrategy::None, OrderStrategy::Down] {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.order_strategy = strategy;
            cfg.seed = seed;
            cfg.word_dropout = choice.word;
            cfg.variational_dropout = choice.variational;
            cfg.weight_dropconnect = choice.weight_drop;
            cfg.run_id = format!("{}_{}_s{}", base.run_id, strategy, seed);
            let art = run_train(&cfg)?;
            let acc = art
                .test_accuracy
                .ok_or_else(|| TrainError::Data("ordering study needs test data".to_string()))?;
            eprintln!("{}: test acc {:.4}", cfg.run_id, acc);
            per_seed.push((seed, acc));
        }
        let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
        summaries.push(StrategySummary { strategy, per_seed, mean_test_accuracy: mean });
    }
    Ok(OrderingOutcome { choice, summaries })
}
