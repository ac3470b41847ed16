//! Raw dense kernels. Every reduction runs in a fixed left-to-right order so
//! results are reproducible bit-for-bit. Matrix products accumulate in f64
//! and round once per output element.

use super::{NumericsError, Scalar, Tensor};

/// `a [p×q] · b [q×s]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(NumericsError::shape("matmul", a.shape(), b.shape()));
    }
    let (p, q, s) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f64; p * s];
    let (ad, bd) = (widen(a.data()), widen(b.data()));
    for i in 0..p {
        let orow = &mut out[i * s..(i + 1) * s];
        for k in 0..q {
            let av = ad[i * q + k];
            let brow = &bd[k * s..(k + 1) * s];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(p, s, narrow(out)))
}

/// `aᵀ · b` for `a [q×p]`, `b [q×s]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.rows() != b.rows() {
        return Err(NumericsError::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (q, p, s) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f64; p * s];
    let (ad, bd) = (widen(a.data()), widen(b.data()));
    for k in 0..q {
        let brow = &bd[k * s..(k + 1) * s];
        for i in 0..p {
            let av = ad[k * p + i];
            let orow = &mut out[i * s..(i + 1) * s];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::matrix(p, s, narrow(out)))
}

/// `a · bᵀ` for `a [p×q]`, `b [s×q]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (p, q, s) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![T::zero(); p * s];
    let (ad, bd) = (widen(a.data()), widen(b.data()));
    for i in 0..p {
        let arow = &ad[i * q..(i + 1) * q];
        for j in 0..s {
            let brow = &bd[j * q..(j + 1) * q];
            out[i * s + j] = T::lit(dot(arow, brow));
        }
    }
    Ok(Tensor::matrix(p, s, out))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn narrow<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::lit).collect()
}

/// Softmax of one row in place; `keep[j] == false` entries are treated as
/// `-inf`. A row with nothing kept becomes all zeros.
pub(crate) fn softmax_slice<T: Scalar>(row: &mut [T], keep: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            total += v.as_f64();
        } else {
            *v = T::zero();
        }
    }
    let total = T::lit(total);
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise softmax with an optional boolean keep-mask of the same shape.
pub fn softmax_rows<T: Scalar>(
    x: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>, NumericsError> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(NumericsError::shape("softmax_rows mask", x.shape(), &[m.len()]));
        }
    }
    let c = x.cols();
    let mut out = x.clone();
    if c == 0 {
        return Ok(out);
    }
    for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
        match mask {
            Some(m) => softmax_slice(row, |j| m[i * c + j]),
            None => softmax_slice(row, |_| true),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn identity_and_selector() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let sel = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(
            matmul(&sel, &b).unwrap(),
            Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]])
        );
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
        let at = a.transpose();
        assert!(matmul_tn(&at, &b).unwrap().max_abs_diff(&got) <= 1e-12);
        let bt = b.transpose();
        assert!(matmul_nt(&a, &bt).unwrap().max_abs_diff(&got) <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn zero_inner_dimension_gives_zeros() {
        let out = matmul(&Tensor::<f64>::zeros(3, 0), &Tensor::zeros(0, 2)).unwrap();
        assert_eq!(out, Tensor::zeros(3, 2));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::row_vector(vec![0.0f64, 0.0]), None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::row_vector(vec![3.0f64, 9.0]), Some(&[true, false])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax_rows(&Tensor::row_vector(vec![1.0f64, 2.0, 3.0]), None).unwrap();
        let expected = [0.09003, 0.24473, 0.66524];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        let s = softmax_rows(&Tensor::row_vector(vec![1.0f64, 2.0]), Some(&[false, false])).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6, 9).scale(10.0);
        let mask: Vec<bool> = (0..54).map(|i| i % 9 <= i / 9).collect();
        let s = softmax_rows(&x, Some(&mask)).unwrap();
        for i in 0..6 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() <= 1e-6);
        }
    }
}
