use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// A named, contiguous block of the flat parameter vector holding a
/// row-major `rows x cols` matrix (`cols == 1` for biases).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, kind: SegmentKind, rows: usize, cols: usize) -> usize {
        let offset = self.len;
        self.segments.push(Segment { name: name.into(), kind, rows, cols, offset });
        self.len += rows * cols;
        offset
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Whether every segment is contiguous and in order.
    pub fn is_consistent(&self) -> bool {
        let mut at = 0;
        for s in &self.segments {
            if s.offset != at {
                return false;
            }
            at += s.len();
        }
        at == self.len
    }
}

/// Flat weights of the whole network plus a version counter. This is what
/// the server and clients exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
    pub version: u64,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self { values: vec![0.0; layout.len()], layout, version: 0 }
    }

    pub fn zeros_like(other: &ParameterVector) -> Self {
        Self::zeros(other.layout.clone())
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>, version: u64) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Contract(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout, version })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of squares over weight segments; biases are excluded.
    pub fn weight_sq_sum(&self) -> f64 {
        self.layout
            .segments()
            .iter()
            .filter(|s| s.kind == SegmentKind::Weight)
            .map(|s| self.values[s.range()].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Payload size when sent over the wire as 64-bit floats.
    pub fn byte_size(&self) -> u64 {
        (self.values.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn check_same_shape(&self, other: &ParameterVector) -> Result<()> {
        if self.values.len() != other.values.len() || *self.layout != *other.layout {
            return Err(Error::Contract(format!(
                "shape mismatch: {} vs {} parameters",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }
}

/// Uniform `+-1/sqrt(cols)` weights per matrix, zero biases, and a forget-gate
/// bias of 1 for every LSTM layer.
pub(crate) fn init_values(layout: &Layout, forget_bias: &[std::ops::Range<usize>], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.len()];
    for s in layout.segments() {
        if s.kind == SegmentKind::Weight {
            let bound = 1.0 / (s.cols as f64).sqrt();
            for v in &mut values[s.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    for r in forget_bias {
        values[r.clone()].fill(1.0);
    }
    values
}
