//! Dense row-major `f32` tensors and the handful of kernels the attention
//! path needs: matmul, masked softmax, row gather/scatter and 1-D pooling.
//!
//! Every kernel is a pure function with a fixed accumulation order, so a
//! single-threaded run is bit-reproducible.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * std)
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Sub-tensor at position `i` of the leading axis.
    pub fn slice_outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Parameter("cannot stack zero tensors".into()));
        };
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `C = A·B`. Each output element accumulates its products in ascending
/// inner-index order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul")?;
    let (k2, n) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (c, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * b_pj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with optional mask (`true` = attend, `false` = masked).
///
/// Masked entries come out as exactly `0.0`. A row with no unmasked entry
/// is an error rather than a row of NaNs.
pub fn softmax_rows(m: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (rows, cols) = m.expect_matrix("softmax_rows")?;
    if let Some(mask) = mask {
        if mask.len() != rows * cols {
            return Err(Error::shape("softmax_rows mask", &m.shape, &[mask.len()]));
        }
    }
    let allowed = |i: usize| mask.is_none_or(|mk| mk[i]);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let base = r * cols;
        let row = &m.data[base..base + cols];
        let max = (0..cols)
            .filter(|&j| allowed(base + j))
            .map(|j| row[j])
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = 0.0f64;
        for j in 0..cols {
            if allowed(base + j) {
                let e = (row[j] - max).exp();
                out[base + j] = e;
                sum += f64::from(e);
            }
        }
        for j in 0..cols {
            if allowed(base + j) {
                out[base + j] = (f64::from(out[base + j]) / sum) as f32;
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

pub(crate) fn validate_indices(idx: &[usize], len: usize) -> Result<()> {
    for (pos, &i) in idx.iter().enumerate() {
        if i >= len {
            return Err(Error::Index(format!("index {i} out of range for length {len}")));
        }
        if pos > 0 && idx[pos - 1] >= i {
            return Err(Error::Index(format!(
                "indices must be strictly ascending, found {} then {i}",
                idx[pos - 1]
            )));
        }
    }
    Ok(())
}

/// Copies the rows listed in `idx` (strictly ascending) into a new matrix.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (len, d) = t.expect_matrix("gather_rows")?;
    validate_indices(idx, len)?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Writes row `r` of `compressed` to row `idx[r]` of a zero `len × d` matrix.
pub fn scatter_rows(compressed: &Tensor, idx: &[usize], len: usize) -> Result<Tensor> {
    let (rows, d) = compressed.expect_matrix("scatter_rows")?;
    if rows != idx.len() {
        return Err(Error::shape("scatter_rows", &compressed.shape, &[idx.len()]));
    }
    validate_indices(idx, len)?;
    let mut out = Tensor::zeros(&[len, d]);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(compressed.row(r));
    }
    Ok(out)
}

/// Same-length moving average over `[t - k/2, t + k/2]`. Windows are clipped
/// at the sequence edges and averaged over the entries that remain.
pub fn avg_pool_1d(values: &[f32], kernel: usize) -> Result<Vec<f32>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Parameter(format!(
            "pooling kernel must be odd and positive, got {kernel}"
        )));
    }
    if kernel == 1 {
        return Ok(values.to_vec());
    }
    let half = kernel / 2;
    let len = values.len();
    Ok((0..len)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(len - 1);
            let sum: f64 = values[lo..=hi].iter().map(|&x| f64::from(x)).sum();
            (sum / (hi - lo + 1) as f64) as f32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&b, &ones).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_random_8x8_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[8, 8], 1.0, &mut rng);
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b));
    }

    proptest! {
        #[test]
        fn matmul_matches_naive_oracle(m in 1usize..=32, k in 1usize..=32, n in 1usize..=32, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let got = matmul(&a, &b).unwrap();
            prop_assert_eq!(got.data(), &naive_matmul(&a, &b)[..]);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in prop::collection::vec(-20.0f32..20.0, 1..40),
            shift in -50.0f32..50.0,
            mask_bits in prop::collection::vec(any::<bool>(), 40),
        ) {
            let n = row.len();
            let mut mask: Vec<bool> = mask_bits[..n].to_vec();
            mask[0] = true;
            let t = Tensor::new(vec![1, n], row.clone()).unwrap();
            let p = softmax_rows(&t, Some(&mask)).unwrap();
            let sum: f64 = p.data().iter().map(|&x| f64::from(x)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            for j in 0..n {
                if !mask[j] {
                    prop_assert_eq!(p.data()[j], 0.0);
                }
            }
            let shifted = Tensor::new(vec![1, n], row.iter().map(|x| x + shift).collect()).unwrap();
            let q = softmax_rows(&shifted, Some(&mask)).unwrap();
            prop_assert!(p.max_abs_diff(&q).unwrap() <= 1e-6);
        }

        #[test]
        fn gather_then_scatter_restores_selected_rows(
            len in 1usize..30,
            d in 1usize..5,
            keep in prop::collection::vec(any::<bool>(), 30),
            seed: u64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&[len, d], 1.0, &mut rng);
            let idx: Vec<usize> = (0..len).filter(|&i| keep[i]).collect();
            let back = scatter_rows(&gather_rows(&t, &idx).unwrap(), &idx, len).unwrap();
            for i in 0..len {
                if idx.contains(&i) {
                    prop_assert_eq!(back.row(i), t.row(i));
                } else {
                    prop_assert!(back.row(i).iter().all(|x| x.to_bits() == 0));
                }
            }
        }

        #[test]
        fn avg_pool_monotone_in_each_element(
            v in prop::collection::vec(0.0f32..10.0, 1..30),
            k in prop::sample::select(vec![1usize, 3, 5, 7]),
            pos in 0usize..30,
            bump in 0.0f32..5.0,
        ) {
            let pos = pos % v.len();
            let base = avg_pool_1d(&v, k).unwrap();
            let mut w = v.clone();
            w[pos] += bump;
            let raised = avg_pool_1d(&w, k).unwrap();
            for (a, b) in base.iter().zip(&raised) {
                prop_assert!(b >= a);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let p = softmax_rows(&t, None).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-7);
        }

        let t = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let p = softmax_rows(&t, None).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);

        let t = Tensor::from_rows(&[vec![std::f32::consts::LN_2, 0.0]]).unwrap();
        let p = softmax_rows(&t, None).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_single_unmasked_entry_is_exactly_one() {
        let t = Tensor::from_rows(&[vec![3.0, -2.0, 9.0]]).unwrap();
        let p = softmax_rows(&t, Some(&[false, true, false])).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let err = softmax_rows(&t, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn gather_examples() {
        let t = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(gather_rows(&t, &[0, 1, 2]).unwrap(), t);
        assert_eq!(gather_rows(&t, &[0, 2]).unwrap().data(), &[1.0, 3.0]);
        let empty = gather_rows(&t, &[]).unwrap();
        assert_eq!(empty.shape(), &[0, 1]);
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let t = Tensor::zeros(&[3, 2]);
        assert!(matches!(gather_rows(&t, &[3]), Err(Error::Index(_))));
        assert!(matches!(gather_rows(&t, &[1, 1]), Err(Error::Index(_))));
        assert!(matches!(gather_rows(&t, &[2, 0]), Err(Error::Index(_))));
    }

    #[test]
    fn scatter_examples() {
        let tc = Tensor::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(scatter_rows(&tc, &[1], 3).unwrap().data(), &[0.0, 5.0, 0.0]);
        let full = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(scatter_rows(&full, &[0, 1], 2).unwrap(), full);
        assert!(scatter_rows(&tc, &[0, 1], 3).is_err());
        assert!(scatter_rows(&tc, &[3], 3).is_err());
    }

    #[test]
    fn avg_pool_examples() {
        let v = [0.0, 3.0, 0.0];
        assert_eq!(avg_pool_1d(&v, 1).unwrap(), v);
        assert_eq!(avg_pool_1d(&v, 3).unwrap(), vec![1.5, 1.0, 1.5]);
        let c = [2.5f32; 9];
        for k in [1, 3, 5, 7, 11] {
            assert!(avg_pool_1d(&c, k).unwrap().iter().all(|&x| x == 2.5));
        }
        assert!(avg_pool_1d(&v, 2).is_err());
        assert!(avg_pool_1d(&v, 0).is_err());
    }

    #[test]
    fn avg_pool_interior_windows_preserve_mean() {
        // Periodic signal with period equal to the kernel: interior outputs
        // all equal the signal mean.
        let v: Vec<f32> = (0..21).map(|i| (i % 3) as f32).collect();
        let out = avg_pool_1d(&v, 3).unwrap();
        for &x in &out[1..20] {
            assert!((x - 1.0).abs() < 1e-6);
        }
    }
}
