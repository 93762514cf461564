//! Checkpoint files: a line-oriented text manifest followed by the raw
//! parameter payload.
//!
//! Manifest grammar, one entry per line, terminated by `end manifest`:
//!   checkpoint v1
//!   meta <key> <value to end of line>
//!   block <name> <line_count>   (followed by that many raw text lines)
//!   param <name> <rows> <cols>
//! Payload: each declared param's values as little-endian f64, row-major,
//! concatenated in declaration order.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("payload holds {got} bytes, manifest declares {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("no parameter named '{0}'")]
    MissingParam(String),
}

fn parse_err(line: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse { line, reason: reason.into() }
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint<F: Scalar> {
    /// Ordered key/value pairs; keys may repeat.
    pub meta: Vec<(String, String)>,
    /// Named multi-line text blocks (e.g. layer plans).
    pub blocks: Vec<(String, String)>,
    /// Named tensors in save order.
    pub params: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new() -> Self {
        Checkpoint { meta: Vec::new(), blocks: Vec::new(), params: Vec::new() }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        assert!(!key.contains(char::is_whitespace), "meta key must be one word");
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn add_block(&mut self, name: &str, text: &str) {
        assert!(!name.contains(char::is_whitespace), "block name must be one word");
        self.blocks.push((name.to_string(), text.to_string()));
    }

    pub fn block(&self, name: &str) -> Option<&str> {
        self.blocks.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn push_param(&mut self, name: &str, value: Tensor<F>) {
        assert!(!name.contains(char::is_whitespace), "param name must be one word");
        self.params.push((name.to_string(), value));
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<F>, CheckpointError> {
        self.params
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut manifest = String::from("checkpoint v1\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, text) in &self.blocks {
            let lines: Vec<&str> = text.lines().collect();
            manifest.push_str(&format!("block {name} {}\n", lines.len()));
            for l in &lines {
                manifest.push_str(l);
                manifest.push('\n');
            }
        }
        for (name, t) in &self.params {
            manifest.push_str(&format!("param {name} {} {}\n", t.rows(), t.cols()));
        }
        manifest.push_str("end manifest\n");

        let payload_len: usize = self.params.iter().map(|(_, t)| t.len() * 8).sum();
        let mut bytes = Vec::with_capacity(manifest.len() + payload_len);
        bytes.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.params {
            for &v in t.data() {
                bytes.extend_from_slice(&v.into_f64().to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint<F>, CheckpointError> {
        fn next_line(
            data: &[u8],
            offset: &mut usize,
            line_no: &mut usize,
        ) -> Result<String, CheckpointError> {
            *line_no += 1;
            let rest = &data[*offset..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| parse_err(*line_no, "missing 'end manifest'"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| parse_err(*line_no, "manifest is not UTF-8"))?
                .to_string();
            *offset += nl + 1;
            Ok(line)
        }

        let data = fs::read(path)?;
        let mut offset = 0usize;
        let mut line_no = 0usize;
        let header = next_line(&data, &mut offset, &mut line_no)?;
        if header != "checkpoint v1" {
            return Err(parse_err(1, format!("bad header '{header}'")));
        }
        let mut ckpt = Checkpoint::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        loop {
            let line = next_line(&data, &mut offset, &mut line_no)?;
            if line == "end manifest" {
                break;
            }
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| parse_err(line_no, format!("bad entry '{line}'")))?;
            match kind {
                "meta" => {
                    let (key, value) = rest
                        .split_once(' ')
                        .ok_or_else(|| parse_err(line_no, "meta needs a key and a value"))?;
                    ckpt.meta.push((key.to_string(), value.to_string()));
                }
                "block" => {
                    let (name, count) = rest
                        .split_once(' ')
                        .ok_or_else(|| parse_err(line_no, "block needs a name and a line count"))?;
                    let count: usize = count
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad line count '{count}'")))?;
                    let mut text = String::new();
                    for i in 0..count {
                        if i > 0 {
                            text.push('\n');
                        }
                        text.push_str(&next_line(&data, &mut offset, &mut line_no)?);
                    }
                    ckpt.blocks.push((name.to_string(), text));
                }
                "param" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 3 {
                        return Err(parse_err(line_no, "param needs a name and two dims"));
                    }
                    let rows: usize = fields[1]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad rows '{}'", fields[1])))?;
                    let cols: usize = fields[2]
                        .parse()
                        .map_err(|_| parse_err(line_no, format!("bad cols '{}'", fields[2])))?;
                    shapes.push((fields[0].to_string(), rows, cols));
                }
                other => return Err(parse_err(line_no, format!("unknown entry '{other}'"))),
            }
        }

        let payload = &data[offset..];
        let expected: usize = shapes.iter().map(|&(_, r, c)| r * c * 8).sum();
        if payload.len() != expected {
            return Err(CheckpointError::PayloadSize { expected, got: payload.len() });
        }
        let mut cursor = 0usize;
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                let raw: [u8; 8] = payload[cursor + i * 8..cursor + (i + 1) * 8].try_into().unwrap();
                values.push(F::from_f64(f64::from_le_bytes(raw)));
            }
            cursor += n * 8;
            ckpt.params.push((name, Tensor::from_vec(rows, cols, values)));
        }
        Ok(ckpt)
    }
}
