//! Per-epoch metrics rows and the CSV they serialize to.

use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str = "run_id,task,epoch,split,loss,perplexity,accuracy,lr,seconds";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub run_id: String,
    pub task: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// exp(loss) for lm/recite rows, absent for pos.
    pub perplexity: Option<f64>,
    /// Token accuracy for pos/recite rows, absent for lm.
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

fn push_num(out: &mut String, v: f64) {
    if v.is_nan() {
        out.push_str("NaN");
    } else if v.is_infinite() {
        out.push_str(if v > 0.0 { "inf" } else { "-inf" });
    } else {
        let _ = write!(out, "{v:.6}");
    }
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{},{},{},{},",
            self.run_id, self.task, self.epoch, self.split
        );
        push_num(&mut out, self.loss);
        out.push(',');
        if let Some(p) = self.perplexity {
            push_num(&mut out, p);
        }
        out.push(',');
        if let Some(a) = self.accuracy {
            push_num(&mut out, a);
        }
        out.push(',');
        let _ = write!(out, "{}", self.lr);
        out.push(',');
        let _ = write!(out, "{:.3}", self.seconds);
        out
    }
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    std::fs::write(path, text)
}
