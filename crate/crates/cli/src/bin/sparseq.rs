use std::path::PathBuf;
use std::process::exit;

use clap::{Args, Parser, Subcommand};

use sparseq_cli::config::{ExperimentConfig, Task};
use sparseq_cli::model::{lm_from_checkpoint, pos_from_checkpoint, LmModel, PosModel};
use sparseq_cli::train::{eval_lm_stream, eval_pos, numericalize_tagged, run_train};
use sparseq_core::checkpoint::Checkpoint;
use sparseq_core::corpus::{lm_batches, load_tagged_corpus, load_text_corpus, Vocabulary};
use sparseq_core::embedding::{allocate_lengths, allocation_csv, solve_alpha, uniform_bins};
use sparseq_core::plan::{
    count_lstm_params, plan_recurrent_layer, solve_gamma_for_equal_params,
};

#[derive(Parser)]
#[command(name = "sparseq", about = "Sparse LSTM and embedding experiment runner", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set "learning rate=5". Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lay out one sparse recurrent layer and report its parameter count.
    Plan {
        /// Input size of the layer.
        #[arg(long)]
        i: usize,
        /// Hidden size of the layer.
        #[arg(long)]
        h: usize,
        /// Number of components.
        #[arg(long)]
        n: usize,
        /// Input window fraction in (0, 1].
        #[arg(long, conflicts_with = "match_dense")]
        gamma: Option<f64>,
        /// Solve gamma so the layer matches a dense i=h=SIZE layer's budget.
        #[arg(long, value_name = "SIZE")]
        match_dense: Option<usize>,
        /// Input size of the dense layer being matched (defaults to --match-dense).
        #[arg(long, value_name = "SIZE", requires = "match_dense")]
        match_dense_input: Option<usize>,
    },
    /// Solve the embedding density equation for alpha.
    SolveAlpha {
        /// Maximum embedding length.
        #[arg(long)]
        k: usize,
        /// Target embedding density in (0, 1].
        #[arg(long)]
        delta: f64,
        /// Number of bins (defaults to k: one dimension per bin).
        #[arg(long)]
        bins: Option<usize>,
        /// Vocabulary size; prints the per-bin allocation summary.
        #[arg(long)]
        vocab: Option<usize>,
        /// Also print the full per-word length CSV (needs --vocab).
        #[arg(long, requires = "vocab")]
        dump_lengths: bool,
    },
    /// Print a model's parameter table without training it.
    Params(ConfigArgs),
    /// Train a model; writes a metrics CSV and the best checkpoint.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on one data split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (defaults to the config's checkpoint path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Data split to evaluate.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Greedy next-token accuracy of a checkpoint over the training corpus.
    Recite {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (defaults to the config's checkpoint path).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

struct DataError(String);

impl<E: std::fmt::Display> From<E> for DataError {
    fn from(e: E) -> Self {
        DataError(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            exit(1);
        }
    };
    match run(cli.cmd) {
        Ok(code) => exit(code),
        Err(DataError(msg)) => {
            eprintln!("error: {msg}");
            exit(2);
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, DataError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    for spec in &args.sets {
        cfg.apply_override(spec)?;
    }
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<i32, DataError> {
    match cmd {
        Cmd::Plan { i, h, n, gamma, match_dense, match_dense_input } => {
            let (gamma, dense_count) = match (gamma, match_dense) {
                (Some(g), None) => (g, None),
                (None, Some(dense_h)) => {
                    let dense_i = match_dense_input.unwrap_or(dense_h);
                    let g = solve_gamma_for_equal_params(dense_i, dense_h, i, h, n)?;
                    let dense = plan_recurrent_layer(dense_i, dense_h, 1, 1.0, None)?;
                    (g, Some(count_lstm_params(&dense)))
                }
                (None, None) if n == 1 => (1.0, None),
                _ => {
                    return Err(DataError(
                        "need --gamma or --match-dense when --n > 1".to_string(),
                    ))
                }
            };
            let plan = plan_recurrent_layer(i, h, n, gamma, None)?;
            print!("{plan}");
            println!("gamma = {gamma:.6}");
            println!("parameters = {}", count_lstm_params(&plan));
            if let Some(dense) = dense_count {
                println!("dense parameters = {dense}");
            }
            Ok(0)
        }
        Cmd::SolveAlpha { k, delta, bins, vocab, dump_lengths } => {
            let widths = uniform_bins(k, bins.unwrap_or(k));
            let alpha = solve_alpha(k, delta, &widths)?;
            println!("alpha = {alpha:.6}");
            if let Some(v) = vocab {
                let alloc = allocate_lengths(v, k, alpha, &widths)?;
                println!("realized density = {:.6}", alloc.realized_density());
                let full = alloc.lengths.iter().filter(|&&l| l == k).count();
                println!("full-length words = {full}");
                println!("bin,width,words");
                for (m, &(width, words)) in alloc.bins.iter().enumerate() {
                    println!("{m},{width},{words}");
                }
                if dump_lengths {
                    print!("{}", allocation_csv(&alloc, None));
                }
            }
            Ok(0)
        }
        Cmd::Params(args) => {
            let cfg = load_config(&args)?;
            let table = match cfg.task {
                Task::Pos => {
                    let (v, t) = pos_dims(&cfg)?;
                    PosModel::build_for_count(&cfg, v, t)?.param_table()
                }
                Task::Lm | Task::Recite => {
                    let v = lm_vocab_size(&cfg)?;
                    LmModel::build_for_count(&cfg, v)?.param_table()
                }
            };
            let width = table.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
            let total: u64 = table.iter().map(|(_, c)| c).sum();
            for (name, count) in &table {
                println!("{name:width$}  {count}");
            }
            println!("total parameters {total} ({:.2}M)", total as f64 / 1.0e6);
            Ok(0)
        }
        Cmd::Train(args) => {
            let cfg = load_config(&args)?;
            let art = run_train(&cfg)?;
            if art.diverged {
                eprintln!("training diverged; metrics written to {}", cfg.metrics_path().display());
                return Ok(3);
            }
            println!("metrics written to {}", cfg.metrics_path().display());
            if let Some(epoch) = art.best_epoch {
                println!("checkpoint (epoch {epoch}) written to {}", cfg.checkpoint_path().display());
            }
            match cfg.task {
                Task::Recite => println!("best accuracy = {:.6}", art.max_recite_accuracy),
                Task::Lm => println!("best valid loss = {:.6}", art.best_valid_loss),
                Task::Pos => {
                    println!("best valid loss = {:.6}", art.best_valid_loss);
                    if let Some(acc) = art.best_valid_accuracy {
                        println!("valid accuracy = {:.6}", acc);
                    }
                }
            }
            if let Some(acc) = art.test_accuracy {
                println!("test accuracy = {:.6}", acc);
            }
            if let Some(loss) = art.test_loss {
                println!("test loss = {:.6}", loss);
            }
            Ok(0)
        }
        Cmd::Eval { cfg: args, checkpoint, split } => {
            let cfg = load_config(&args)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let data_path = split_path(&cfg, split)?;
            let ckpt = Checkpoint::<f64>::load(&ckpt_path)?;
            match cfg.task {
                Task::Pos => {
                    let (model, vocab, tags) = pos_from_checkpoint(&ckpt)?;
                    let sentences = load_tagged_corpus(&data_path)?;
                    let data = numericalize_tagged(&sentences, &vocab, &tags);
                    if data.unknown_tags > 0 {
                        eprintln!(
                            "{} tokens carry tags outside the training inventory and count as errors",
                            data.unknown_tags
                        );
                    }
                    let (loss, acc) = eval_pos(&model, &data);
                    println!("loss = {loss:.6}");
                    println!("accuracy = {acc:.6}");
                }
                Task::Lm | Task::Recite => {
                    let (model, vocab) = lm_from_checkpoint(&ckpt)?;
                    let (loss, acc) = eval_lm_split(&cfg, &model, &vocab, &data_path)?;
                    println!("loss = {loss:.6}");
                    println!("perplexity = {:.6}", loss.exp());
                    if matches!(cfg.task, Task::Recite) {
                        println!("accuracy = {acc:.6}");
                    }
                }
            }
            Ok(0)
        }
        Cmd::Recite { cfg: args, checkpoint } => {
            let cfg = load_config(&args)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path());
            let data_path = split_path(&cfg, Split::Train)?;
            let ckpt = Checkpoint::<f64>::load(&ckpt_path)?;
            let (model, vocab) = lm_from_checkpoint(&ckpt)?;
            let (loss, acc) = eval_lm_split(&cfg, &model, &vocab, &data_path)?;
            println!("recite accuracy = {acc:.6}");
            println!("loss = {loss:.6}");
            println!("perplexity = {:.6}", loss.exp());
            Ok(0)
        }
    }
}

fn eval_lm_split(
    cfg: &ExperimentConfig,
    model: &LmModel,
    vocab: &Vocabulary,
    path: &std::path::Path,
) -> Result<(f64, f64), DataError> {
    let tokens = load_text_corpus(path)?;
    if tokens.is_empty() {
        return Err(DataError(format!("{} is empty", path.display())));
    }
    let ids = vocab.numericalize(&tokens);
    let batches = lm_batches(&ids, cfg.batch_size, cfg.bptt_length)?;
    Ok(eval_lm_stream(model, &batches))
}

fn split_path(cfg: &ExperimentConfig, split: Split) -> Result<PathBuf, DataError> {
    let (path, name) = match split {
        Split::Train => (&cfg.train_data, "train data"),
        Split::Valid => (&cfg.valid_data, "valid data"),
        Split::Test => (&cfg.test_data, "test data"),
    };
    path.clone().ok_or_else(|| DataError(format!("config has no `{name}`")))
}

fn lm_vocab_size(cfg: &ExperimentConfig) -> Result<usize, DataError> {
    if let Some(v) = cfg.vocab_size {
        return Ok(v);
    }
    let path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| DataError("need `vocab size` or `train data`".to_string()))?;
    let tokens = load_text_corpus(path)?;
    let vocab = Vocabulary::build(&tokens, cfg.min_count)?;
    Ok(vocab.len())
}

fn pos_dims(cfg: &ExperimentConfig) -> Result<(usize, usize), DataError> {
    if let (Some(v), Some(t)) = (cfg.vocab_size, cfg.tagset_size) {
        return Ok((v, t));
    }
    let path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| DataError("need `vocab size` and `tagset size`, or `train data`".to_string()))?;
    let sentences = load_tagged_corpus(path)?;
    let tokens: Vec<&str> = sentences
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| t.as_str()))
        .collect();
    let vocab = Vocabulary::build(&tokens, cfg.min_count)?;
    let tags = sparseq_core::corpus::TagSet::build(&sentences);
    Ok((cfg.vocab_size.unwrap_or(vocab.len()), cfg.tagset_size.unwrap_or(tags.len())))
}
