//! Ranking metrics for anomaly scores and dataset reconstruction error.
//!
//! Anomalous slices are the positive class and higher scores mean "more anomalous".

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::mse_per_sample;
use crate::model::{Model, Sampling};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    /// `labels[i]` is true for anomalous slices. Scores must be finite.
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Invalid("scored set is empty".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("score {i} is {}", scores[i])));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// Mann–Whitney AUROC: the chance a random positive outscores a random negative, ties counting one half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (p, n) = (set.positives(), set.negatives());
    if p == 0 || n == 0 {
        return Err(Error::Invalid("auroc needs both anomalous and normal slices".into()));
    }
    let mut idx: Vec<usize> = (0..set.scores.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // twice the U statistic, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < idx.len() && set.scores[idx[j]] == set.scores[idx[i]] {
            if set.labels[idx[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        twice_u += gp * (2 * neg_below + gn);
        neg_below += gn;
        i = j;
    }
    Ok(twice_u as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Non-interpolated average precision: the mean, over positives in descending-score
/// order, of the precision at each positive's rank. Equal scores keep their input order.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::Invalid(
            "average precision needs at least one anomalous slice".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..set.scores.len()).collect();
    idx.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if set.labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / p as f64)
}

/// Per-slice MSE of each variant's full reconstruction.
///
/// With `rng = None` latents are posterior means; otherwise one posterior draw per slice.
pub fn per_slice_mse(
    model: &Model,
    slices: &Tensor,
    mut rng: Option<&mut SeedStream>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if slices.shape().len() != 4 {
        return Err(Error::shape(
            "dataset_mse",
            format!("expected (N, 1, S, S), got {:?}", slices.shape()),
        ));
    }
    let n = slices.batch();
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
        let xb = slices.select_rows(&idx)?;
        let mut g = Graph::new();
        let x = g.constant(xb.clone());
        let fp = match rng.as_deref_mut() {
            Some(r) => model.forward(&mut g, x, &mut Sampling::Draw(r))?,
            None => model.forward(&mut g, x, &mut Sampling::Mean)?,
        };
        out.extend(mse_per_sample(&xb, g.value(fp.recon.x_combined))?);
        start += idx.len();
    }
    Ok(out)
}

/// Mean per-pixel squared reconstruction error over a set of slices.
pub fn dataset_mse(model: &Model, slices: &Tensor, rng: Option<&mut SeedStream>) -> Result<f64> {
    if slices.numel() == 0 {
        return Err(Error::Invalid("dataset_mse on an empty set".into()));
    }
    let per = per_slice_mse(model, slices, rng, 64)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
