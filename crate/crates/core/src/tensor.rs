//! Dense row-major f64 tensors and the small kernel set the rest of the
//! crate is built on.
//!
//! Everything is 64-bit: the models here are tiny, so precision is cheap
//! and lets the tests pin tight tolerances. Kernels are pure functions
//! with deterministic (left-to-right) summation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major numeric array.
///
/// Invariant: `shape.iter().product() == data.len()`, and all elements are
/// finite after any public operation unless the operation says otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a flat vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::Dimension(format!(
                    "ragged rows: expected {} columns, got {}",
                    n_cols,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![n_rows, n_cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Dimensions of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!(
                "expected 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// L2 norm of the flat data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Elementwise difference; shapes must agree.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some((i, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!(
                "{context}: non-finite value {v} at flat index {i}"
            )));
        }
        Ok(())
    }
}

/// Standard matrix product of 2-D tensors, accumulating left-to-right
/// over the inner dimension.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Transpose of a 2-D tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.get2(i, j);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Temperature softmax over a 1-D tensor, max-subtracted for stability.
pub fn softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if x.rank() != 1 || x.is_empty() {
        return Err(Error::Dimension(format!(
            "softmax expects a nonempty 1-D tensor, got shape {:?}",
            x.shape()
        )));
    }
    Ok(Tensor::from_vec(softmax_slice(x.data(), temperature)?))
}

/// Slice-level softmax shared with the model internals.
pub(crate) fn softmax_slice(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`,
/// with population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 1 || gain.rank() != 1 || bias.rank() != 1 {
        return Err(Error::Dimension(
            "layer_norm expects 1-D tensors".to_string(),
        ));
    }
    if x.len() != gain.len() || x.len() != bias.len() || x.is_empty() {
        return Err(Error::Dimension(format!(
            "layer_norm length mismatch: x={}, gain={}, bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if eps < 0.0 {
        return Err(Error::Parameter(format!(
            "layer_norm eps must be nonnegative, got {eps}"
        )));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_slice(x.data(), gain.data(), bias.data(), eps, &mut out);
    Ok(Tensor::from_vec(out))
}

pub(crate) fn layer_norm_slice(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gain.iter().zip(bias)) {
        *o = (v - mean) * inv * g + b;
    }
}

/// Value at 1-indexed rank `ceil(top_fraction * n)` after sorting
/// descending (stable on original index). Downstream selection compares
/// with `>=`, so ties at the threshold are all admitted.
pub fn rank_threshold(values: &Tensor, top_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Dimension(
            "rank_threshold on empty tensor".to_string(),
        ));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "top_fraction must lie in (0, 1], got {top_fraction}"
        )));
    }
    let n = values.len();
    let mut sorted: Vec<f64> = values.data().to_vec();
    // Stable descending sort; input is finite by invariant.
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_product() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[3.0], &[4.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(vec![2, 2]);
        let m = t2(&[&[5.0, -1.0, 2.0], &[0.5, 9.0, 3.0]]);
        let c = matmul(&z, &m).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&t1(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Oracle: direct e^z / sum(e^z).
        let z: [f64; 3] = [2.0, 1.0, 0.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let p = softmax(&t1(&z), 1.0).unwrap();
        for (a, b) in p.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // Frozen values from the oracle.
        for (a, b) in p.data().iter().zip(&[0.6652, 0.2447, 0.0900]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        // Direct-evaluation oracle: p0 = e^(5/1000) / (e^(5/1000) + 1).
        let e = (5.0f64 / 1000.0).exp();
        let oracle = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let p = softmax(&t1(&[5.0, 0.0]), 1000.0).unwrap();
        for (&v, &o) in p.data().iter().zip(&oracle) {
            assert!((v - o).abs() < 1e-12);
            // Limit behavior: both components close to 0.5 (true gap is
            // 5/4000 = 1.25e-3).
            assert!((v - 0.5).abs() < 1.5e-3);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(matches!(
            softmax(&t1(&[1.0]), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            softmax(&t1(&[1.0]), -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn layer_norm_zero_variance_maps_to_bias() {
        let x = t1(&[1.0, 1.0, 1.0]);
        let out = layer_norm(&x, &Tensor::filled(vec![3], 1.0), &Tensor::zeros(vec![3]), 1e-5)
            .unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        let x = t1(&[1.0, -1.0]);
        let out = layer_norm(&x, &Tensor::filled(vec![2], 1.0), &Tensor::zeros(vec![2]), 0.0)
            .unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
        assert!((out.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_gain_passes_bias_through() {
        let x = t1(&[3.0, -7.0]);
        let out = layer_norm(&x, &Tensor::zeros(vec![2]), &Tensor::filled(vec![2], 5.0), 1e-5)
            .unwrap();
        assert_eq!(out.data(), &[5.0, 5.0]);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let err = layer_norm(
            &t1(&[1.0, 2.0]),
            &Tensor::zeros(vec![3]),
            &Tensor::zeros(vec![2]),
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn rank_threshold_hand_case() {
        let v = t1(&[0.9, 0.1, -0.5, 0.3]);
        // ceil(0.35 * 4) = 2; sorted desc [0.9, 0.3, 0.1, -0.5] -> 0.3
        assert_eq!(rank_threshold(&v, 0.35).unwrap(), 0.3);
    }

    #[test]
    fn rank_threshold_singleton_and_ties() {
        assert_eq!(rank_threshold(&t1(&[7.0]), 1.0).unwrap(), 7.0);
        assert_eq!(rank_threshold(&t1(&[2.0, 2.0, 2.0]), 0.34).unwrap(), 2.0);
    }

    #[test]
    fn rank_threshold_rejects_bad_fraction() {
        for f in [0.0, -0.2, 1.5] {
            assert!(matches!(
                rank_threshold(&t1(&[1.0]), f),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn tensor_new_checks_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(values in proptest::collection::vec(-20.0f64..20.0, 1..40)) {
            let p = softmax(&t1(&values), 1.0).unwrap();
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            let argmax_in = values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let argmax_out = p
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            prop_assert_eq!(values[argmax_in], values[argmax_out]);
            prop_assert_eq!(argmax_in, argmax_out);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut random = |shape: Vec<usize>| {
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            };
            let a = random(vec![4, 4]);
            let b = random(vec![4, 4]);
            let c = random(vec![4, 4]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / scale <= 1e-9);
            }
        }

        #[test]
        fn rank_threshold_full_fraction_is_min(values in proptest::collection::vec(-100.0f64..100.0, 1..50)) {
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(rank_threshold(&t1(&values), 1.0).unwrap(), min);
        }

        #[test]
        fn layer_norm_standardizes(values in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
            let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - values.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-6);
            let n = values.len();
            let out = layer_norm(
                &t1(&values),
                &Tensor::filled(vec![n], 1.0),
                &Tensor::zeros(vec![n]),
                0.0,
            )
            .unwrap();
            let mean: f64 = out.data().iter().sum::<f64>() / n as f64;
            let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-12);
            prop_assert!((var - 1.0).abs() <= 1e-9);
        }
    }
}
