use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, ValueEnum};

use sparseq_cli::datagen::{pos_corpus, recite_corpus};
use sparseq_core::corpus::write_tagged_corpus;

#[derive(Parser)]
#[command(name = "sparseq-datagen", about = "Generate the synthetic desk-scale corpora")]
struct Cli {
    #[arg(long)]
    task: GenTask,
    /// Recite: output file. Tagging: output directory, receives
    /// pos_train.txt / pos_valid.txt / pos_test.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenTask {
    Recite,
    Pos,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            exit(1);
        }
    };
    if let Err(msg) = run(&cli) {
        eprintln!("error: {msg}");
        exit(2);
    }
}

fn run(cli: &Cli) -> Result<(), String> {
    match cli.task {
        GenTask::Recite => {
            std::fs::write(&cli.out, recite_corpus(cli.seed))
                .map_err(|e| format!("cannot write {}: {e}", cli.out.display()))?;
            println!("wrote {}", cli.out.display());
        }
        GenTask::Pos => {
            std::fs::create_dir_all(&cli.out)
                .map_err(|e| format!("cannot create {}: {e}", cli.out.display()))?;
            let corpus = pos_corpus(cli.seed);
            for (name, split) in [
                ("pos_train.txt", &corpus.train),
                ("pos_valid.txt", &corpus.valid),
                ("pos_test.txt", &corpus.test),
            ] {
                let path = cli.out.join(name);
                write_tagged_corpus(&path, split)
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
