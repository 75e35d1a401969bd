use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numkit::{kahan_sum, sq_dist, weighted_sum, ParamVector};

/// Floor applied to squared distances, relative to the row's mean squared distance.
pub const DISTANCE_EPSILON: f64 = 1e-12;

/// Tolerance on row sums of a weight matrix.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Aggregation weights for one round.
///
/// Row `r` holds the weights that participant `participants[r]` applies to the models
/// uploaded by every participant, in the same order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightMatrix {
    pub round: usize,
    pub participants: Vec<usize>,
    entries: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_rows(round: usize, participants: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = participants.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!(
                "weight matrix for {n} participants needs {n}x{n} entries"
            )));
        }
        let m = WeightMatrix {
            round,
            participants,
            entries: rows.into_iter().flatten().collect(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn identity(round: usize, participants: Vec<usize>) -> Self {
        let n = participants.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        WeightMatrix {
            round,
            participants,
            entries,
        }
    }

    pub fn uniform(round: usize, participants: Vec<usize>) -> Self {
        let n = participants.len();
        WeightMatrix {
            round,
            participants,
            entries: vec![1.0 / n as f64; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.participants.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.size();
        &self.entries[r * n..(r + 1) * n]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.size() + c]
    }

    /// Checks that every row lies on the probability simplex.
    pub fn validate(&self) -> Result<()> {
        for r in 0..self.size() {
            let row = self.row(r);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "weight row {r} has a negative or non-finite entry"
                )));
            }
            let s = kahan_sum(row.iter().copied());
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("weight row {r} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Client ids that receive nonzero weight in each row.
    pub fn support(&self, r: usize) -> Vec<usize> {
        self.row(r)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, _)| self.participants[c])
            .collect()
    }

    /// CSV with a header of client ids; each row starts with the aggregating client.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client");
        for id in &self.participants {
            out.push(',');
            out.push_str(&id.to_string());
        }
        out.push('\n');
        for (r, id) in self.participants.iter().enumerate() {
            out.push_str(&id.to_string());
            for p in self.row(r) {
                out.push(',');
                out.push_str(&format!("{p:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Normalized inverse squared distances.
///
/// If any distance is exactly zero, the row is split uniformly over the zero-distance
/// entries. Otherwise distances are floored at `DISTANCE_EPSILON * mean(d)` and
/// `p_j = d_j^{-1} / sum_k d_k^{-1}`.
pub fn weights_from_sq_dists(d: &[f64]) -> Result<Vec<f64>> {
    if d.is_empty() {
        return Err(Error::Empty("no distances to weight"));
    }
    if let Some(bad) = d.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "squared distances must be finite and >= 0, got {bad}"
        )));
    }
    let zeros = d.iter().filter(|&&v| v == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return Ok(d.iter().map(|&v| if v == 0.0 { share } else { 0.0 }).collect());
    }
    let mean = kahan_sum(d.iter().copied()) / d.len() as f64;
    let floor = DISTANCE_EPSILON * mean;
    let clamped: Vec<f64> = d.iter().map(|&v| v.max(floor)).collect();
    let dmin = clamped.iter().copied().fold(f64::INFINITY, f64::min);
    // Scaling by the smallest distance keeps every ratio in (0, 1].
    let inv: Vec<f64> = clamped.iter().map(|&v| dmin / v).collect();
    let total = kahan_sum(inv.iter().copied());
    Ok(inv.into_iter().map(|v| v / total).collect())
}

/// Weight row for one client: inverse squared distances between its guidance model
/// and every uploaded model.
pub fn compute_weights(guidance: &ParamVector, models: &[ParamVector]) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Empty("compute_weights needs at least one model"));
    }
    let d = models
        .iter()
        .map(|m| sq_dist(guidance, m))
        .collect::<Result<Vec<f64>>>()?;
    weights_from_sq_dists(&d)
}

/// Keeps the `k` largest entries (ties to the lower index), zeroes the rest and
/// renormalizes to sum one.
pub fn top_k(row: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = row.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top_k needs 1 <= K <= {n}, got {k}")));
    }
    if k == n {
        return Ok(row.to_vec());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &j in &order[..k] {
        out[j] = row[j];
    }
    let total = kahan_sum(out.iter().copied());
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "top_k row has no positive mass among the kept entries".into(),
        ));
    }
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// `w_i = sum_j p_{i,j} models[j]` for every row of `weights`.
pub fn aggregate_personalized(
    weights: &WeightMatrix,
    models: &[ParamVector],
) -> Result<Vec<ParamVector>> {
    if models.len() != weights.size() {
        return Err(Error::Dimension(format!(
            "{} models for a {}-participant weight matrix",
            models.len(),
            weights.size()
        )));
    }
    let refs: Vec<&ParamVector> = models.iter().collect();
    (0..weights.size())
        .into_par_iter()
        .map(|r| weighted_sum(weights.row(r), &refs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn equal_distances_uniform() {
        let p = weights_from_sq_dists(&[2.5; 4]).unwrap();
        assert!(close(&p, &[0.25; 4], 1e-15));
    }

    #[test]
    fn closed_form_examples() {
        assert!(close(&weights_from_sq_dists(&[1.0, 4.0]).unwrap(), &[0.8, 0.2], 1e-15));
        let p = weights_from_sq_dists(&[1.0, 2.0, 4.0]).unwrap();
        assert!(close(&p, &[4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0], 1e-15));
    }

    #[test]
    fn zero_distance_set_split_uniformly() {
        let p = weights_from_sq_dists(&[0.0, 3.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(weights_from_sq_dists(&[0.0; 3]).unwrap(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn tiny_distance_clamped() {
        let p = weights_from_sq_dists(&[1e-300, 1.0, 1.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(p[0] > 0.999_999);
    }

    #[test]
    fn negative_distance_rejected() {
        assert!(weights_from_sq_dists(&[1.0, -1.0]).is_err());
        assert!(weights_from_sq_dists(&[]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let row = [0.5, 0.3, 0.2];
        assert_eq!(top_k(&row, 3).unwrap(), row.to_vec());
        assert!(close(&top_k(&row, 2).unwrap(), &[0.625, 0.375, 0.0], 1e-15));
        assert_eq!(top_k(&[0.4, 0.4, 0.2], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(top_k(&row, 0).is_err());
        assert!(top_k(&row, 4).is_err());
    }

    #[test]
    fn identity_and_uniform_aggregation() {
        let models: Vec<ParamVector> = (0..3)
            .map(|i| ParamVector::from_flat(vec![i as f64, 1.0 - i as f64 * 0.3]).unwrap())
            .collect();
        let out = aggregate_personalized(&WeightMatrix::identity(1, vec![0, 1, 2]), &models).unwrap();
        assert_eq!(out, models);
        let avg = aggregate_personalized(&WeightMatrix::uniform(1, vec![0, 1, 2]), &models).unwrap();
        for m in &avg {
            assert!(close(m.values(), &[1.0, 0.7], 1e-15));
        }
    }

    #[test]
    fn swapping_identical_models_changes_nothing() {
        let a = ParamVector::from_flat(vec![1.0, 2.0]).unwrap();
        let b = ParamVector::from_flat(vec![-1.0, 0.5]).unwrap();
        let w = WeightMatrix::from_rows(
            1,
            vec![0, 1, 2],
            vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3], vec![0.0, 0.5, 0.5]],
        )
        .unwrap();
        let before = aggregate_personalized(&w, &[a.clone(), a.clone(), b.clone()]).unwrap();
        let after = aggregate_personalized(&w, &[a.clone(), a, b]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn matrix_validation_and_csv() {
        assert!(WeightMatrix::from_rows(1, vec![0, 1], vec![vec![0.5, 0.6], vec![1.0, 0.0]]).is_err());
        let w = WeightMatrix::from_rows(3, vec![2, 5], vec![vec![0.25, 0.75], vec![1.0, 0.0]]).unwrap();
        assert_eq!(w.support(1), vec![2]);
        assert_eq!(w.to_csv(), "client,2,5\n2,2.5e-1,7.5e-1\n5,1e0,0e0\n");
    }
}
