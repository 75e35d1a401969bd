//! Classification models with analytic loss and gradient.
//!
//! Two architectures are supported: multinomial softmax regression and a
//! one-hidden-layer tanh MLP. Both use mean cross-entropy over a batch, computed
//! with a max-shifted log-sum-exp.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{check_finite, Layout, ParamVector, Rng, Segment};

/// Labeled feature matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no samples"));
        }
        if dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs positive feature width and class count".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        check_finite(&features)?;
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.dim, self.num_classes)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

/// Architecture description. The parameter layout is a pure function of this spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden width; ignored for softmax regression.
    pub hidden_dim: usize,
    pub init_scale: f64,
}

pub const DEFAULT_INIT_SCALE: f64 = 0.05;

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Softmax,
            input_dim,
            num_classes,
            hidden_dim: 0,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dim,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    pub fn with_init_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "model input_dim and num_classes must be positive".into(),
            ));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("mlp hidden_dim must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "init_scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let (f, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::Softmax => Layout::new(vec![
                Segment::new("weight", [c, f]),
                Segment::new("bias", [c]),
            ]),
            ModelKind::Mlp => Layout::new(vec![
                Segment::new("hidden.weight", [h, f]),
                Segment::new("hidden.bias", [h]),
                Segment::new("out.weight", [c, h]),
                Segment::new("out.bias", [c]),
            ]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().numel()
    }

    fn check(&self, params: &ParamVector, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim {
            return Err(Error::Dimension(format!(
                "batch has {} features, model expects {}",
                data.dim(),
                self.input_dim
            )));
        }
        if data.num_classes() > self.num_classes {
            return Err(Error::Dimension(format!(
                "dataset has {} classes, model outputs {}",
                data.num_classes(),
                self.num_classes
            )));
        }
        if params.len() != self.num_params() || **params.layout() != self.layout() {
            return Err(Error::LayoutMismatch(format!(
                "parameters {} do not match model layout {}",
                params.layout(),
                self.layout()
            )));
        }
        Ok(())
    }
}

/// Draws parameters uniformly from `[-init_scale, init_scale]`.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> Result<ParamVector> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let s = spec.init_scale;
    let values = (0..layout.numel())
        .map(|_| if s == 0.0 { 0.0 } else { rng.uniform_range(-s, s) })
        .collect();
    ParamVector::new(values, layout)
}

/// Mean cross-entropy of `params` on `batch`.
pub fn loss(params: &ParamVector, batch: &Dataset, spec: &ModelSpec) -> Result<f64> {
    spec.check(params, batch)?;
    Ok(forward_backward(params.values(), batch, None, spec, false).0)
}

/// Gradient of the mean cross-entropy, laid out like `params`.
pub fn grad(params: &ParamVector, batch: &Dataset, spec: &ModelSpec) -> Result<ParamVector> {
    loss_and_grad(params, batch, spec).map(|(_, g)| g)
}

pub fn loss_and_grad(
    params: &ParamVector,
    batch: &Dataset,
    spec: &ModelSpec,
) -> Result<(f64, ParamVector)> {
    spec.check(params, batch)?;
    let (l, g) = forward_backward(params.values(), batch, None, spec, true);
    Ok((l, params.with_values(g)?))
}

/// Loss and gradient restricted to the rows in `rows`.
pub(crate) fn loss_and_grad_rows(
    params: &ParamVector,
    data: &Dataset,
    rows: &[usize],
    spec: &ModelSpec,
) -> Result<(f64, ParamVector)> {
    spec.check(params, data)?;
    if rows.is_empty() {
        return Err(Error::Empty("batch has no rows"));
    }
    let (l, g) = forward_backward(params.values(), data, Some(rows), spec, true);
    Ok((l, params.with_values(g)?))
}

/// Fraction of argmax-correct predictions; ties go to the lowest class index.
pub fn accuracy(params: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy on an empty dataset"));
    }
    spec.check(params, data)?;
    let mut logits = vec![0.0; spec.num_classes];
    let mut hidden = vec![0.0; spec.hidden_dim];
    let correct = (0..data.len())
        .filter(|&i| {
            logits_into(params.values(), data.row(i), spec, &mut hidden, &mut logits);
            argmax(&logits) == data.label(i)
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub fn predict(params: &ParamVector, x: &[f64], spec: &ModelSpec) -> Result<usize> {
    if x.len() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "input has {} features, model expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    let mut logits = vec![0.0; spec.num_classes];
    let mut hidden = vec![0.0; spec.hidden_dim];
    logits_into(params.values(), x, spec, &mut hidden, &mut logits);
    Ok(argmax(&logits))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Computes output logits; fills `hidden` with tanh activations for the MLP.
fn logits_into(p: &[f64], x: &[f64], spec: &ModelSpec, hidden: &mut [f64], logits: &mut [f64]) {
    let (f, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    match spec.kind {
        ModelKind::Softmax => {
            let (w, b) = p.split_at(c * f);
            for k in 0..c {
                logits[k] = b[k] + dot(&w[k * f..(k + 1) * f], x);
            }
        }
        ModelKind::Mlp => {
            let (w1, rest) = p.split_at(h * f);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for j in 0..h {
                hidden[j] = (b1[j] + dot(&w1[j * f..(j + 1) * f], x)).tanh();
            }
            for k in 0..c {
                logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Converts logits into probabilities in place and returns `-log p[label]`.
fn softmax_nll(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    for l in logits.iter_mut() {
        *l /= z;
    }
    z.ln() - shifted_label
}

fn forward_backward(
    p: &[f64],
    data: &Dataset,
    rows: Option<&[usize]>,
    spec: &ModelSpec,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let (f, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let n = rows.map_or(data.len(), <[usize]>::len);
    let inv_n = 1.0 / n as f64;
    let mut g = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
    let mut logits = vec![0.0; c];
    let mut hidden = vec![0.0; h];
    let mut dhidden = vec![0.0; h];
    let mut total = 0.0;

    for r in 0..n {
        let i = rows.map_or(r, |rs| rs[r]);
        let x = data.row(i);
        let y = data.label(i);
        logits_into(p, x, spec, &mut hidden, &mut logits);
        total += softmax_nll(&mut logits, y);
        if !want_grad {
            continue;
        }
        // logits now holds probabilities; turn into dL/dlogits.
        logits[y] -= 1.0;
        for v in logits.iter_mut() {
            *v *= inv_n;
        }
        match spec.kind {
            ModelKind::Softmax => {
                let (gw, gb) = g.split_at_mut(c * f);
                for k in 0..c {
                    let dk = logits[k];
                    for (gwk, xj) in gw[k * f..(k + 1) * f].iter_mut().zip(x) {
                        *gwk += dk * xj;
                    }
                    gb[k] += dk;
                }
            }
            ModelKind::Mlp => {
                let w2 = &p[h * f + h..h * f + h + c * h];
                let (gw1, rest) = g.split_at_mut(h * f);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                dhidden.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..c {
                    let dk = logits[k];
                    for j in 0..h {
                        gw2[k * h + j] += dk * hidden[j];
                        dhidden[j] += dk * w2[k * h + j];
                    }
                    gb2[k] += dk;
                }
                for j in 0..h {
                    let dpre = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                    for (gw, xm) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                        *gw += dpre * xm;
                    }
                    gb1[j] += dpre;
                }
            }
        }
    }
    (total * inv_n, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: Vec<usize>, c: usize) -> Dataset {
        let n = labels.len();
        let features = (0..n * 2).map(|k| (k as f64 * 0.37).sin()).collect();
        Dataset::new(features, labels, 2, c).unwrap()
    }

    #[test]
    fn softmax_layout_count() {
        assert_eq!(ModelSpec::softmax(4, 3).num_params(), 15);
        assert_eq!(ModelSpec::mlp(4, 5, 3).num_params(), 4 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn zero_init_scale_gives_zeros() {
        let spec = ModelSpec::softmax(4, 3).with_init_scale(0.0);
        let p = init_params(&spec, &mut Rng::new(1)).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_deterministic_and_bounded() {
        let spec = ModelSpec::mlp(3, 4, 2);
        let a = init_params(&spec, &mut Rng::new(5)).unwrap();
        let b = init_params(&spec, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn zero_params_uniform_loss() {
        for c in [2usize, 10] {
            let spec = ModelSpec::softmax(2, c);
            let p = ParamVector::zeros(Arc::new(spec.layout()));
            let d = tiny(vec![0, 1, 1, 0], c);
            let l = loss(&p, &d, &spec).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12, "C={c}: {l}");
        }
    }

    #[test]
    fn balanced_labels_zero_bias_gradient() {
        let spec = ModelSpec::softmax(2, 2);
        let p = ParamVector::zeros(Arc::new(spec.layout()));
        let d = tiny(vec![0, 1, 0, 1], 2);
        let g = grad(&p, &d, &spec).unwrap();
        assert!(g.segment("bias").unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn accuracy_ties_go_to_class_zero() {
        let spec = ModelSpec::softmax(2, 3);
        let p = ParamVector::zeros(Arc::new(spec.layout()));
        let d = tiny(vec![0, 1, 2, 0, 0], 3);
        assert!((accuracy(&p, &d, &spec).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let spec = ModelSpec::softmax(3, 2);
        let p = ParamVector::zeros(Arc::new(spec.layout()));
        let d = tiny(vec![0, 1], 2);
        assert!(matches!(loss(&p, &d, &spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            Dataset::new(vec![], vec![], 2, 2),
            Err(Error::Empty(_))
        ));
        let d = tiny(vec![0, 1], 2);
        assert!(d.subset(&[]).is_err());
    }

    #[test]
    fn label_out_of_range() {
        assert!(Dataset::new(vec![0.0, 0.0], vec![2], 2, 2).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let spec = ModelSpec::softmax(2, 2);
        let p = ParamVector::from_flat(vec![1e6, 1e6, -1e6, -1e6, 0.0, 0.0]).unwrap();
        let p = ParamVector::new(p.into_values(), Arc::new(spec.layout())).unwrap();
        let d = Dataset::new(vec![1.0, 1.0], vec![1], 2, 2).unwrap();
        let (l, g) = loss_and_grad(&p, &d, &spec).unwrap();
        assert!(l.is_finite() && l > 1e5);
        assert!(g.values().iter().all(|v| v.is_finite()));
    }
}
