use crate::error::{Error, Result};
use crate::models::{loss_and_grad_rows, Dataset, ModelSpec};
use crate::numkit::{ParamVector, Rng};

/// One client's data, current personalized model and local optimizer settings.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Model held for this client; the personalized model for FedDWA.
    pub model: ParamVector,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Model this client uploaded the last time it participated.
    pub last_trained: Option<ParamVector>,
}

impl ClientState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "client {}: learning rate must be finite and >= 0, got {}",
                self.id, self.lr
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {}: batch size and local epochs must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Proximal anchor for FedProx-style local objectives: `f(w) + mu/2 ||w - anchor||^2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a ParamVector,
}

/// Mini-batch SGD over `epochs` passes of `data`, reshuffling every epoch.
///
/// The final partial batch is kept.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgd(
    client_id: usize,
    data: &Dataset,
    start: &ParamVector,
    spec: &ModelSpec,
    lr: f64,
    batch_size: usize,
    epochs: usize,
    prox: Option<Proximal<'_>>,
    rng: &mut Rng,
) -> Result<ParamVector> {
    let mut w = start.clone();
    if lr == 0.0 {
        return Ok(w);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        for (b, rows) in order.chunks(batch_size).enumerate() {
            let (loss, g) = loss_and_grad_rows(&w, data, rows, spec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "client {client_id}: loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            let mut values = w.into_values();
            match prox {
                Some(p) if p.mu != 0.0 => {
                    for ((wk, gk), ak) in values.iter_mut().zip(g.values()).zip(p.anchor.values()) {
                        *wk -= lr * (gk + p.mu * (*wk - ak));
                    }
                }
                _ => {
                    for (wk, gk) in values.iter_mut().zip(g.values()) {
                        *wk -= lr * gk;
                    }
                }
            }
            w = start.with_values(values).map_err(|e| {
                Error::NonFinite(format!("client {client_id}: epoch {epoch}, batch {b}: {e}"))
            })?;
        }
    }
    Ok(w)
}

/// Runs the client's local epochs of mini-batch SGD from `start`.
pub fn local_train(
    client: &ClientState,
    start: &ParamVector,
    spec: &ModelSpec,
    rng: &mut Rng,
) -> Result<ParamVector> {
    client.validate()?;
    sgd(
        client.id,
        &client.train,
        start,
        spec,
        client.lr,
        client.batch_size,
        client.local_epochs,
        None,
        rng,
    )
}

/// Uniform sample without replacement of `max(1, round(fraction * n))` client ids, sorted.
pub fn select_participants(n: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "participation fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut ids = rng.sample_indices(n, k);
    ids.sort_unstable();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{grad, init_params};
    use crate::numkit::axpy;

    fn client(lr: f64, batch: usize, epochs: usize) -> (ClientState, ModelSpec) {
        let spec = ModelSpec::softmax(2, 2);
        let feats = vec![0.1, 0.9, 0.8, 0.2, 0.4, 0.4, 0.7, 0.1, 0.3, 0.6];
        let train = Dataset::new(feats, vec![1, 0, 1, 0, 1], 2, 2).unwrap();
        let model = init_params(&spec, &mut Rng::new(3)).unwrap();
        let c = ClientState {
            id: 0,
            test: train.clone(),
            train,
            model,
            lr,
            batch_size: batch,
            local_epochs: epochs,
            last_trained: None,
        };
        (c, spec)
    }

    #[test]
    fn zero_lr_returns_start() {
        let (c, spec) = client(0.0, 2, 3);
        let out = local_train(&c, &c.model, &spec, &mut Rng::new(1)).unwrap();
        assert_eq!(out, c.model);
    }

    #[test]
    fn full_batch_single_epoch_is_one_gradient_step() {
        let (c, spec) = client(0.1, 100, 1);
        let out = local_train(&c, &c.model, &spec, &mut Rng::new(1)).unwrap();
        let g = grad(&c.model, &c.train, &spec).unwrap();
        let expect = axpy(-0.1, &g, &c.model).unwrap();
        for (a, b) in out.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn participants_sizes() {
        let mut rng = Rng::new(1);
        assert_eq!(select_participants(5, 1.0, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_participants(100, 0.2, &mut rng).unwrap().len(), 20);
        assert_eq!(select_participants(10, 0.01, &mut rng).unwrap().len(), 1);
        let a = select_participants(50, 0.3, &mut Rng::new(8)).unwrap();
        let b = select_participants(50, 0.3, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
        assert!(select_participants(10, 0.0, &mut rng).is_err());
        assert!(select_participants(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn invalid_client_settings() {
        let (mut c, spec) = client(0.1, 0, 1);
        assert!(local_train(&c, &c.model.clone(), &spec, &mut Rng::new(1)).is_err());
        c.batch_size = 1;
        c.lr = f64::NAN;
        assert!(local_train(&c, &c.model.clone(), &spec, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn divergence_reported() {
        let (c, spec) = client(1e308, 1, 5);
        let err = local_train(&c, &c.model.clone(), &spec, &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
