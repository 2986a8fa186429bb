//! Dense row-major matrices, similarity kernels, Adam, and a central
//! finite-difference gradient used to verify the analytic backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New matrix made of the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row vector times matrix: `x · self`, where `x.len() == self.rows`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            axpy(xv, self.row(r), &mut out);
        }
        out
    }

    /// `self · y` for a column vector `y` with `y.len() == self.cols`
    /// (equivalently `y · selfᵀ` for a row vector).
    pub fn mul_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), y)).collect()
    }

    /// Accumulates the outer product `self += xᵀ g`.
    pub fn add_outer(&mut self, x: &[f64], g: &[f64]) {
        debug_assert_eq!((x.len(), g.len()), self.shape());
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            axpy(xv, g, self.row_mut(r));
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let row = other.vec_mul(self.row(r));
            out.row_mut(r).copy_from_slice(&row);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-norm copy of `v`; errors on a zero vector.
pub fn normalized(v: &[f64], what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroNorm(what.to_string()));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// All-pairs cosine similarity between the rows of `a` and `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols || a.cols == 0 {
        return Err(Error::Shape(format!("cosine of widths {} and {}", a.cols, b.cols)));
    }
    let units = |m: &Matrix| -> Result<Vec<Vec<f64>>> {
        (0..m.rows).map(|r| Ok(normalized(m.row(r), "cosine_matrix row")?.0)).collect()
    };
    let (ua, ub) = (units(a)?, units(b)?);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for (i, x) in ua.iter().enumerate() {
        for (j, y) in ub.iter().enumerate() {
            out.data[i * b.rows + j] = dot(x, y).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity operand".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
pub(crate) fn cosine_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    (c, ga, gb)
}

/// Gaussian kernel `exp(−‖a−b‖² / (2σ²))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "gaussian kernel of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok((-squared_distance(a, b) / (2.0 * sigma * sigma)).exp())
}

/// Indices of the `k` largest values, sorted ascending by index. Ties are
/// resolved in favour of the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Row-wise softmax of `scale · logits` restricted to unmasked entries
/// (`mask[i] == true` means the entry participates). Masked entries are
/// exactly zero and a fully masked row is all zeros.
pub fn masked_row_softmax(logits: &Matrix, mask: &[bool], scale: f64) -> Matrix {
    assert_eq!(mask.len(), logits.rows() * logits.cols(), "mask shape");
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let m = &mask[r * logits.cols()..(r + 1) * logits.cols()];
        let probs = softmax_masked(logits.row(r), m, scale);
        out.row_mut(r).copy_from_slice(&probs);
    }
    out
}

pub(crate) fn softmax_masked(logits: &[f64], mask: &[bool], scale: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| scale * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    if max == f64::NEG_INFINITY {
        return out;
    }
    let mut total = 0.0;
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(mask) {
        if m {
            *o = (scale * l - max).exp();
            total += *o;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Adam hyperparameters. Only the learning rate comes from the training
/// setup; the moment decay rates and epsilon are the usual defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }

    pub fn for_param(p: &Matrix) -> Self {
        Self::new(p.rows(), p.cols())
    }
}

/// One bias-corrected Adam step. Pure: returns the new parameter and state.
pub fn adam_step(
    param: &Matrix,
    grad: &Matrix,
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Matrix, AdamState)> {
    if param.shape() != grad.shape()
        || param.shape() != state.m.shape()
        || param.shape() != state.v.shape()
    {
        return Err(Error::Shape(format!(
            "adam param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("adam config {cfg:?}")));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut next = param.clone();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..param.data.len() {
        let g = grad.data[i];
        m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g;
        v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m.data[i] / bc1;
        let v_hat = v.data[i] / bc2;
        next.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("adam update".into()));
    }
    Ok((next, AdamState { m, v, t }))
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, eps: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64,
{
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[2.0, 0.0], &[4.0, 0.0]).unwrap(), 1.0);
        let c = cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap();
        assert!((c - 24.0 / 25.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_kernel(&[0.3, -1.0], &[0.3, -1.0], 0.7).unwrap(), 1.0);
        let g = gaussian_kernel(&[0.0, 0.0], &[3.0, 4.0], 5.0).unwrap();
        assert!((g - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g - 0.60653).abs() < 1e-5);
        let far = gaussian_kernel(&[0.0], &[1.0], 1e6).unwrap();
        assert!((far - 1.0).abs() < 1e-9);
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[5.0, 1.0, 3.0], 2), vec![0, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 1.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[-1.0, 4.0, 0.0, 4.0, 2.0], 3), vec![1, 3, 4]);
        assert_eq!(top_k_indices(&[1.0, 2.0], 5), vec![0, 1]);
        assert!(top_k_indices(&[1.0, 2.0], 0).is_empty());
    }

    /// Exhaustive oracle: pick every k-subset, keep the one with the largest
    /// value multiset, preferring lexicographically smaller index sets.
    fn top_k_oracle(values: &[f64], k: usize) -> Vec<usize> {
        let n = values.len();
        let k = k.min(n);
        let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            let better = match &best {
                None => true,
                Some((bv, bi)) => match vals.partial_cmp(bv).unwrap() {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => idx < *bi,
                    std::cmp::Ordering::Less => false,
                },
            };
            if better {
                best = Some((vals, idx));
            }
        }
        best.map(|(_, i)| i).unwrap_or_default()
    }

    #[test]
    fn top_k_matches_subset_oracle() {
        assert_eq!(top_k_oracle(&[-1.0, 4.0, 0.0, 4.0, 2.0], 3), vec![1, 3, 4]);
        let v = [0.5, 0.5, 0.1, 0.9, 0.5, -2.0];
        for k in 0..=7 {
            assert_eq!(top_k_indices(&v, k), top_k_oracle(&v, k), "k={k}");
        }
    }

    #[test]
    fn softmax_examples() {
        let one = masked_row_softmax(&Matrix::from_vec(1, 1, vec![7.0]).unwrap(), &[true], 1.5);
        assert_eq!(one.data(), &[1.0]);

        let flat = masked_row_softmax(
            &Matrix::from_vec(1, 3, vec![2.0; 3]).unwrap(),
            &[true; 3],
            4.0,
        );
        for v in flat.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let two = masked_row_softmax(&Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(), &[true; 2], 1.5);
        let e = 1.5f64.exp();
        assert!((two.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((two.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((two.get(0, 0) - 0.8176).abs() < 1e-4);

        let masked = masked_row_softmax(
            &Matrix::from_vec(2, 2, vec![1.0, 3.0, 5.0, 5.0]).unwrap(),
            &[true, false, false, false],
            1.0,
        );
        assert_eq!(masked.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    /// Reference Adam written directly from the recurrence, scalar by scalar.
    fn reference_adam(theta: f64, g: f64, m: f64, v: f64, t: u64, c: &AdamConfig) -> (f64, f64, f64) {
        let m1 = c.beta1 * m + (1.0 - c.beta1) * g;
        let v1 = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let t1 = (t + 1) as i32;
        let mh = m1 / (1.0 - c.beta1.powi(t1));
        let vh = v1 / (1.0 - c.beta2.powi(t1));
        (theta - c.lr * mh / (vh.sqrt() + c.eps), m1, v1)
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let p = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (p1, s1) = adam_step(&p, &Matrix::zeros(2, 2), &AdamState::for_param(&p), &cfg).unwrap();
        assert_eq!(p1, p);
        assert_eq!(s1.t, 1);

        let theta = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let (t1, _) = adam_step(&theta, &g, &AdamState::for_param(&theta), &cfg).unwrap();
        // m̂ = 0.5, v̂ = 0.25 after bias correction
        let expected = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((t1.get(0, 0) - expected).abs() < 1e-15);
        assert!((t1.get(0, 0) - 0.9999).abs() < 1e-8);

        assert!(adam_step(&theta, &Matrix::zeros(1, 2), &AdamState::for_param(&theta), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn adam_matches_reference(
            vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
            steps in 1usize..5,
        ) {
            let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
            let n = vals.len();
            let mut p = Matrix::from_vec(1, n, vals.iter().map(|v| v.0).collect()).unwrap();
            let g = Matrix::from_vec(1, n, vals.iter().map(|v| v.1).collect()).unwrap();
            let mut s = AdamState::for_param(&p);
            let mut reference: Vec<(f64, f64, f64)> = vals.iter().map(|v| (v.0, 0.0, 0.0)).collect();
            for step in 0..steps {
                let (np, ns) = adam_step(&p, &g, &s, &cfg).unwrap();
                for (i, r) in reference.iter_mut().enumerate() {
                    *r = reference_adam(r.0, g.data()[i], r.1, r.2, step as u64, &cfg);
                    prop_assert_eq!(np.data()[i].to_bits(), r.0.to_bits());
                    prop_assert_eq!(ns.m.data()[i].to_bits(), r.1.to_bits());
                    prop_assert!(ns.v.data()[i] >= 0.0);
                }
                prop_assert_eq!(ns.t, step as u64 + 1);
                p = np;
                s = ns;
            }
        }

        #[test]
        fn adam_is_pure(vals in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let p = Matrix::from_vec(2, 2, vals.clone()).unwrap();
            let g = Matrix::from_vec(2, 2, vals.iter().map(|v| v * 0.3 - 0.1).collect()).unwrap();
            let s = AdamState::for_param(&p);
            let a = adam_step(&p, &g, &s, &AdamConfig::default()).unwrap();
            let b = adam_step(&p, &g, &s, &AdamConfig::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cosine_self_is_one(v in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let (u, _) = normalized(&v, "v").unwrap();
            prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn gaussian_symmetric(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            sigma in 0.1f64..5.0,
        ) {
            let ab = gaussian_kernel(&a, &b, sigma).unwrap();
            let ba = gaussian_kernel(&b, &a, sigma).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((0.0..=1.0).contains(&ab));
            if squared_distance(&a, &b) > 1e-12 {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn softmax_rows_sum_and_shift(
            row in proptest::collection::vec(-5.0f64..5.0, 1..8),
            mask_bits in proptest::collection::vec(any::<bool>(), 8),
            shift in -10.0f64..10.0,
            scale in 0.1f64..3.0,
        ) {
            let n = row.len();
            let mask = &mask_bits[..n];
            let m = Matrix::from_vec(1, n, row.clone()).unwrap();
            let out = masked_row_softmax(&m, mask, scale);
            let sum: f64 = out.data().iter().sum();
            if mask.iter().any(|&b| b) {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
            for (o, &b) in out.data().iter().zip(mask) {
                if !b { prop_assert_eq!(*o, 0.0); }
            }
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let out2 = masked_row_softmax(&Matrix::from_vec(1, n, shifted).unwrap(), mask, scale);
            prop_assert!(out.max_abs_diff(&out2) < 1e-12);
        }

        #[test]
        fn top_k_strictly_increasing(values in proptest::collection::vec(-5.0f64..5.0, 0..20), k in 0usize..25) {
            let idx = top_k_indices(&values, k);
            prop_assert_eq!(idx.len(), k.min(values.len()));
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn finite_diff_examples() {
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = finite_diff_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);

        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = finite_diff_grad(|_| 7.5, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let g = finite_diff_grad(|m| m.data().iter().map(|v| 2.0 * v).sum(), &x, 1e-5);
        assert!(g.data().iter().all(|&v| (v - 2.0).abs() < 1e-9));
    }

    #[test]
    fn cosine_grads_match_finite_differences() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.1, 0.4, -0.5];
        let (_, ga, gb) = cosine_grads(&a, &b);
        let am = Matrix::from_vec(1, 3, a.to_vec()).unwrap();
        let fa = finite_diff_grad(|m| cosine_similarity(m.data(), &b).unwrap(), &am, 1e-6);
        let bm = Matrix::from_vec(1, 3, b.to_vec()).unwrap();
        let fb = finite_diff_grad(|m| cosine_similarity(&a, m.data()).unwrap(), &bm, 1e-6);
        for i in 0..3 {
            assert!((ga[i] - fa.data()[i]).abs() < 1e-8);
            assert!((gb[i] - fb.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_matrix_matches_pairwise() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![-1.0, 1.0, 1.0], vec![2.0, 2.0, 0.1], vec![0.0, 0.0, 1.0]]).unwrap();
        let m = cosine_matrix(&a, &b).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((m.get(i, j) - cosine_similarity(a.row(i), b.row(j)).unwrap()).abs() < 1e-15);
            }
        }
        assert!(cosine_matrix(&a, &Matrix::zeros(1, 3)).is_err());
    }
}
