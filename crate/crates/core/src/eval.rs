//! Cross-modal retrieval metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_matrix, Matrix};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Percentage of rows whose ground-truth column ranks within the top `k`
/// (descending similarity, ties to the lower column index). Any of several
/// correct columns counts.
pub fn recall_at_k(sim: &Matrix, ground_truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("recall@k needs k >= 1".into()));
    }
    if ground_truth.len() != sim.rows() {
        return Err(Error::Shape(format!(
            "{} ground-truth rows for a {}-row similarity matrix",
            ground_truth.len(),
            sim.rows()
        )));
    }
    if sim.rows() == 0 {
        return Err(Error::InvalidArgument("recall@k over zero queries".into()));
    }
    let mut hits = 0usize;
    for (r, targets) in ground_truth.iter().enumerate() {
        if targets.is_empty() || targets.iter().any(|&c| c >= sim.cols()) {
            return Err(Error::InvalidArgument(format!("query {r} has no valid ground-truth target")));
        }
        let row = sim.row(r);
        // Rank of column c = number of columns strictly ahead of it.
        let best_rank = targets
            .iter()
            .map(|&c| {
                row.iter()
                    .enumerate()
                    .filter(|&(j, &v)| v > row[c] || (v == row[c] && j < c))
                    .count()
            })
            .min()
            .expect("nonempty");
        if best_rank < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / sim.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RsumBreakdown {
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
}

impl RsumBreakdown {
    pub fn rsum(&self) -> f64 {
        self.values().iter().sum()
    }

    pub fn values(&self) -> [f64; 6] {
        [self.r1_i2t, self.r5_i2t, self.r10_i2t, self.r1_t2i, self.r5_t2i, self.r10_t2i]
    }
}

/// Cosine similarity between every image token and every text token.
pub fn similarity_matrix(img: &Matrix, txt: &Matrix) -> Result<Matrix> {
    cosine_matrix(img, txt)
}

/// Bidirectional Recall@{1,5,10}. `pairing[i]` lists the text rows that
/// match image row `i`; every text row must belong to some image.
pub fn rsum(img: &Matrix, txt: &Matrix, pairing: &[Vec<usize>]) -> Result<(f64, RsumBreakdown)> {
    if img.rows() == 0 || txt.rows() == 0 {
        return Err(Error::InvalidArgument("rsum needs nonempty token sets".into()));
    }
    let sim = similarity_matrix(img, txt)?;
    let mut reverse = vec![Vec::new(); txt.rows()];
    for (i, texts) in pairing.iter().enumerate() {
        for &t in texts {
            if t >= txt.rows() {
                return Err(Error::InvalidArgument(format!("pairing references text row {t}")));
            }
            reverse[t].push(i);
        }
    }
    let simt = sim.transpose();
    let i2t: Vec<f64> = RECALL_KS.iter().map(|&k| recall_at_k(&sim, pairing, k)).collect::<Result<_>>()?;
    let t2i: Vec<f64> = RECALL_KS.iter().map(|&k| recall_at_k(&simt, &reverse, k)).collect::<Result<_>>()?;
    let b = RsumBreakdown {
        r1_i2t: i2t[0],
        r5_i2t: i2t[1],
        r10_i2t: i2t[2],
        r1_t2i: t2i[0],
        r5_t2i: t2i[1],
        r10_t2i: t2i[2],
    };
    Ok((b.rsum(), b))
}

/// One-to-one pairing `i ↔ i`.
pub fn diagonal_pairing(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}
