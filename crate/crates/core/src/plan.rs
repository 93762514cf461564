//! Layout arithmetic for predefined-sparse recurrent layers: segmentations,
//! input windows, parameter counts, and budget-matching solutions.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum PlanError {
    #[error("segment count {segments} exceeds hidden size {hidden}")]
    TooManySegments { segments: usize, hidden: usize },
    #[error("segment count must be at least 1")]
    ZeroSegments,
    #[error("gamma {gamma} outside (0, 1]")]
    GammaOutOfRange { gamma: f64 },
    #[error("window width rounds to zero (gamma {gamma}, input size {input})")]
    WindowRoundsToZero { gamma: f64, input: usize },
    #[error("explicit segment lengths sum to {got}, expected {want}")]
    BadSegmentLengths { got: usize, want: usize },
    #[error("no gamma in (0, 1] matches the budget: required gamma = {gamma:.6}")]
    InfeasibleBudget { gamma: f64 },
    #[error("plan parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One dense LSTM component: a contiguous input window feeding a disjoint
/// slice of the hidden state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentSpec {
    pub input_offset: usize,
    pub input_width: usize,
    pub output_width: usize,
}

/// Per-layer component layout. Output widths partition the hidden state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecurrentSparsityPlan {
    pub input_size: usize,
    pub hidden_size: usize,
    pub components: Vec<ComponentSpec>,
}

impl RecurrentSparsityPlan {
    /// Full-window single component: the dense cell.
    pub fn dense(input_size: usize, hidden_size: usize) -> Self {
        RecurrentSparsityPlan {
            input_size,
            hidden_size,
            components: vec![ComponentSpec {
                input_offset: 0,
                input_width: input_size,
                output_width: hidden_size,
            }],
        }
    }

    pub fn segments(&self) -> usize {
        self.components.len()
    }

    /// Hidden-state offset of each component's output slice.
    pub fn output_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.components.len());
        let mut acc = 0;
        for c in &self.components {
            offs.push(acc);
            acc += c.output_width;
        }
        offs
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.components.is_empty() {
            return Err(PlanError::ZeroSegments);
        }
        let total: usize = self.components.iter().map(|c| c.output_width).sum();
        if total != self.hidden_size {
            return Err(PlanError::BadSegmentLengths { got: total, want: self.hidden_size });
        }
        for c in &self.components {
            if c.output_width == 0 || c.input_width == 0 {
                return Err(PlanError::WindowRoundsToZero { gamma: 0.0, input: self.input_size });
            }
            if c.input_offset + c.input_width > self.input_size {
                return Err(PlanError::Parse {
                    line: 0,
                    reason: format!(
                        "window {}..{} exceeds input size {}",
                        c.input_offset,
                        c.input_offset + c.input_width,
                        self.input_size
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Uniform segmentation of `hidden` into `segments` parts; the first
/// `hidden % segments` parts get one extra unit.
pub fn uniform_segments(hidden: usize, segments: usize) -> Vec<usize> {
    let base = hidden / segments;
    let extra = hidden % segments;
    (0..segments).map(|n| base + usize::from(n < extra)).collect()
}

/// Lays out `segments` components over `input` x `hidden`. Window width is
/// round(gamma*input); window offsets space evenly so the first window starts
/// at 0 and the last ends at the input boundary.
pub fn plan_recurrent_layer(
    input_size: usize,
    hidden_size: usize,
    segments: usize,
    gamma: f64,
    segment_lengths: Option<&[usize]>,
) -> Result<RecurrentSparsityPlan, PlanError> {
    if segments == 0 {
        return Err(PlanError::ZeroSegments);
    }
    if segments > hidden_size {
        return Err(PlanError::TooManySegments { segments, hidden: hidden_size });
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(PlanError::GammaOutOfRange { gamma });
    }
    let width = (gamma * input_size as f64).round() as usize;
    if width == 0 {
        return Err(PlanError::WindowRoundsToZero { gamma, input: input_size });
    }
    let lengths: Vec<usize> = match segment_lengths {
        Some(ls) => {
            if ls.len() != segments || ls.iter().sum::<usize>() != hidden_size || ls.contains(&0) {
                return Err(PlanError::BadSegmentLengths {
                    got: ls.iter().sum(),
                    want: hidden_size,
                });
            }
            ls.to_vec()
        }
        None => uniform_segments(hidden_size, segments),
    };
    let span = (input_size - width) as f64;
    let components = lengths
        .iter()
        .enumerate()
        .map(|(n, &out)| {
            let offset = if segments > 1 {
                (n as f64 * span / (segments as f64 - 1.0)).round() as usize
            } else {
                0
            };
            ComponentSpec { input_offset: offset, input_width: width, output_width: out }
        })
        .collect();
    Ok(RecurrentSparsityPlan { input_size, hidden_size, components })
}

/// 4-gate LSTM parameter count: sum over components of
/// 4*(out*in_width + out^2 + 2*out), the two-bias parameterization.
pub fn count_lstm_params(plan: &RecurrentSparsityPlan) -> u64 {
    plan.components
        .iter()
        .map(|c| {
            let o = c.output_width as u64;
            let i = c.input_width as u64;
            4 * (o * i + o * o + 2 * o)
        })
        .sum()
}

/// Window fraction for which the sparse layer's parameter count equals the
/// dense layer's: closed-form solution of equating the two count formulas.
pub fn solve_gamma_for_equal_params(
    input_dense: usize,
    hidden_dense: usize,
    input_sparse: usize,
    hidden_sparse: usize,
    segments: usize,
) -> Result<f64, PlanError> {
    assert!(segments >= 1, "segment count must be at least 1");
    let (i_d, h_d) = (input_dense as f64, hidden_dense as f64);
    let (i_s, h_s) = (input_sparse as f64, hidden_sparse as f64);
    let numer = h_d * i_d + h_d * h_d + 2.0 * h_d - h_s * h_s / segments as f64 - 2.0 * h_s;
    let gamma = numer / (h_s * i_s);
    if gamma <= 0.0 || gamma > 1.0 {
        return Err(PlanError::InfeasibleBudget { gamma });
    }
    Ok(gamma)
}

/// 0/1 masks over the dense weight layout: block-diagonal `mask_hh` (h x h)
/// and per-row windowed `mask_hi` (h x input).
pub fn expand_plan_to_masks<F: Scalar>(plan: &RecurrentSparsityPlan) -> (Tensor<F>, Tensor<F>) {
    let h = plan.hidden_size;
    let i = plan.input_size;
    let mut mask_hh = Tensor::zeros(h, h);
    let mut mask_hi = Tensor::zeros(h, i);
    let one = F::one();
    let mut row = 0;
    for c in &plan.components {
        for r in row..row + c.output_width {
            for col in row..row + c.output_width {
                mask_hh.set(r, col, one);
            }
            for col in c.input_offset..c.input_offset + c.input_width {
                mask_hi.set(r, col, one);
            }
        }
        row += c.output_width;
    }
    (mask_hh, mask_hi)
}

impl fmt::Display for RecurrentSparsityPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "plan v1")?;
        writeln!(f, "input {}", self.input_size)?;
        writeln!(f, "hidden {}", self.hidden_size)?;
        for (n, c) in self.components.iter().enumerate() {
            writeln!(
                f,
                "component {n}: window {}..{} width {} -> output {}",
                c.input_offset,
                c.input_offset + c.input_width,
                c.input_width,
                c.output_width
            )?;
        }
        Ok(())
    }
}

impl FromStr for RecurrentSparsityPlan {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        let mut input_size = None;
        let mut hidden_size = None;
        let mut components = Vec::new();
        for (idx, line) in s.lines().enumerate() {
            let line = line.trim();
            let err = |reason: &str| PlanError::Parse { line: idx + 1, reason: reason.to_string() };
            if line.is_empty() || line == "plan v1" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("input ") {
                input_size = Some(rest.parse().map_err(|_| err("bad input size"))?);
            } else if let Some(rest) = line.strip_prefix("hidden ") {
                hidden_size = Some(rest.parse().map_err(|_| err("bad hidden size"))?);
            } else if line.starts_with("component ") {
                // component N: window LO..HI width W -> output O
                let body = line.split(": ").nth(1).ok_or_else(|| err("missing component body"))?;
                let mut words = body.split_whitespace();
                let parse_num = |w: Option<&str>| -> Result<usize, PlanError> {
                    w.and_then(|v| v.parse().ok()).ok_or_else(|| err("bad component field"))
                };
                if words.next() != Some("window") {
                    return Err(err("expected 'window'"));
                }
                let range = words.next().ok_or_else(|| err("missing window range"))?;
                let (lo, hi) = range.split_once("..").ok_or_else(|| err("bad window range"))?;
                let lo: usize = lo.parse().map_err(|_| err("bad window start"))?;
                let hi: usize = hi.parse().map_err(|_| err("bad window end"))?;
                if words.next() != Some("width") {
                    return Err(err("expected 'width'"));
                }
                let width = parse_num(words.next())?;
                if hi < lo || width != hi - lo {
                    return Err(err("window width inconsistent with range"));
                }
                if words.next() != Some("->") || words.next() != Some("output") {
                    return Err(err("expected '-> output'"));
                }
                let output_width = parse_num(words.next())?;
                components.push(ComponentSpec { input_offset: lo, input_width: width, output_width });
            } else {
                return Err(err("unrecognized line"));
            }
        }
        let plan = RecurrentSparsityPlan {
            input_size: input_size
                .ok_or(PlanError::Parse { line: 0, reason: "missing input line".into() })?,
            hidden_size: hidden_size
                .ok_or(PlanError::Parse { line: 0, reason: "missing hidden line".into() })?,
            components,
        };
        plan.validate()?;
        Ok(plan)
    }
}
