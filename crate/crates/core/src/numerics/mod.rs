//! Dense tensors, a reverse-mode tape, and a finite-difference gradient oracle.

pub mod graph;
pub mod kernels;
pub mod rng;
mod tensor;

pub use graph::{AttentionShape, Gradients, Graph, Var};
pub use kernels::{matmul, softmax_rows};
pub use tensor::{DType, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    Shape {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Self::Shape {
            op,
            a: a.to_vec(),
            b: b.to_vec(),
        }
    }
}

/// Euclidean norm of the entries of `x` at the flat positions `group`.
pub fn group_l2<T: Scalar>(x: &Tensor<T>, group: &[usize]) -> Result<T, NumericsError> {
    let mut ss = T::zero();
    for &i in group {
        let v = *x.data().get(i).ok_or(NumericsError::Index {
            index: i,
            len: x.len(),
        })?;
        ss = ss + v * v;
    }
    Ok(ss.sqrt())
}

/// Result of a [`grad_check`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − fd| / max(1, |fd|)`
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of a scalar objective against central differences.
///
/// `f` builds the objective on a fresh graph from one leaf per entry of
/// `params`. It is evaluated once with trainable leaves for the analytic
/// gradient and `2·Σ len(params)` more times with constant leaves.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars);
    let base = g.value(root).item();
    if !base.is_finite() {
        return Err(NumericsError::NonFinite(format!("objective = {base}")));
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars);
        let v = g.value(root).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite(format!("objective = {v}")))
        }
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut coordinates = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[i] - fd).abs() / fd.abs().max(1.0);
            max_rel_error = max_rel_error.max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        coordinates,
    })
}
