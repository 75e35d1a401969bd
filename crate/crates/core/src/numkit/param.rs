use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named block of parameters, e.g. a weight matrix or a bias vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>) -> Self {
        Segment {
            name: name.into(),
            shape: shape.into(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of segments describing how a flat parameter vector is laid out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Layout { segments }
    }

    /// Single unnamed segment of length `len`.
    pub fn flat(len: usize) -> Self {
        Layout::new(vec![Segment::new("flat", [len])])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn numel(&self) -> usize {
        self.segments.iter().map(Segment::numel).sum()
    }

    /// Start offset and length of the named segment.
    pub fn range_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for seg in &self.segments {
            let n = seg.numel();
            if seg.name == name {
                return Some(offset..offset + n);
            }
            offset += n;
        }
        None
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|s| format!("{}{:?}", s.name, s.shape))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Flat model parameter vector with layout metadata.
///
/// All aggregation arithmetic operates on this type. Values are kept finite by every
/// constructor and operation; two vectors combine only when their layouts are identical.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.values == other.values
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if layout.numel() != values.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout {layout} holds {} elements but {} values were given",
                layout.numel(),
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(ParamVector { values, layout })
    }

    /// Vector with a single flat segment; handy for tests and bindings.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        let layout = Arc::new(Layout::flat(values.len()));
        ParamVector::new(values, layout)
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector {
            values: vec![0.0; layout.numel()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Size in bytes when transmitted as 64-bit reals.
    pub fn byte_size(&self) -> u64 {
        (self.values.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.range_of(name).map(|r| &self.values[r])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} vs {}",
                self.layout, other.layout
            )))
        }
    }

    /// Builds a vector sharing this one's layout. Rejects non-finite results.
    pub fn with_values(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(values, Arc::clone(&self.layout))
    }

    pub fn scale(&self, alpha: f64) -> Result<ParamVector> {
        self.with_values(self.values.iter().map(|v| alpha * v).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    pub fn norm_sq(&self) -> f64 {
        kahan_sum(self.values.iter().map(|v| v * v))
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "element {i} is {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Neumaier's variant of Kahan compensated summation.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.ensure_same_layout(y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(xi, yi)| alpha * xi + yi)
        .collect();
    y.with_values(values)
}

/// Squared Euclidean distance `sum_k (a_k - b_k)^2`.
pub fn sq_dist(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.ensure_same_layout(b)?;
    Ok(sq_dist_slices(&a.values, &b.values))
}

pub(crate) fn sq_dist_slices(a: &[f64], b: &[f64]) -> f64 {
    kahan_sum(a.iter().zip(b).map(|(x, y)| {
        let d = x - y;
        d * d
    }))
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.ensure_same_layout(b)?;
    Ok(kahan_sum(a.values.iter().zip(&b.values).map(|(x, y)| x * y)))
}

/// `sum_j weights[j] * vectors[j]`, with compensated accumulation per element.
///
/// Zero-weight terms are skipped, so a one-hot weight vector returns the selected
/// vector bit for bit.
pub fn weighted_sum(weights: &[f64], vectors: &[&ParamVector]) -> Result<ParamVector> {
    if weights.is_empty() || vectors.is_empty() {
        return Err(Error::Empty("weighted_sum needs at least one vector"));
    }
    if weights.len() != vectors.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} vectors",
            weights.len(),
            vectors.len()
        )));
    }
    let first = vectors[0];
    for v in &vectors[1..] {
        first.ensure_same_layout(v)?;
    }
    let terms: Vec<(f64, &ParamVector)> = weights
        .iter()
        .copied()
        .zip(vectors.iter().copied())
        .filter(|(w, _)| *w != 0.0)
        .collect();
    let Some(&(w0, v0)) = terms.first() else {
        return Ok(ParamVector::zeros(Arc::clone(first.layout())));
    };
    let d = first.len();
    let mut sum: Vec<f64> = if w0 == 1.0 {
        v0.values.clone()
    } else {
        v0.values.iter().map(|x| w0 * x).collect()
    };
    let mut comp = vec![0.0f64; d];
    for &(w, v) in &terms[1..] {
        for k in 0..d {
            let x = w * v.values[k];
            let t = sum[k] + x;
            if sum[k].abs() >= x.abs() {
                comp[k] += (sum[k] - t) + x;
            } else {
                comp[k] += (x - t) + sum[k];
            }
            sum[k] = t;
        }
    }
    if terms.len() > 1 {
        for (s, c) in sum.iter_mut().zip(&comp) {
            *s += c;
        }
    }
    first.with_values(sum)
}
